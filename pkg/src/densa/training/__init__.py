from densa.training.optimizer import Adam, OptimizerState
from densa.training.trainer import (TrainConfig, TrainingPoints, TrainingExample, LabeledImage, LossResult,
                                    TrainResult, NonFiniteLossError, sample_training_points, prepare_example,
                                    total_loss, train)
from densa.training.gradcheck import check_gradients, numeric_gradient, relative_error
from densa.training.checkpoint import Checkpoint
