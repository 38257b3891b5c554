from densa.evaluation.metrics import (MatchResult, EvalImage, match, average_precision, log_average_miss_rate,
                                      miss_rate_curve, recall, average_false_positives, evaluate, write_metrics)
