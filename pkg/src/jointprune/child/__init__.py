from .data import Dataset, make_shapes, read_dataset, write_dataset
from .model import (ChildConfig, ChildModel, accuracy, bn_gammas, fine_tune, init_model,
                    mask_model, parameter_count, pretrain, retrain, test_loss)
from .evaluator import ChildEvaluator, ExternalEvaluator, Landscape, serve, synthetic_eval
