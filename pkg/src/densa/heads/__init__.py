from densa.heads.layers import ParameterStore, Linear, Mlp, sigmoid, softmax
from densa.heads.model import Heads
from densa.heads.prompt_gen import (compute_heatmap, adapt_features, generate_pseudo_masks, decode_instance_masks,
                                    dice_loss, extract_prompts, PSEUDO_MASK_SIZE)
from densa.heads.pwdnet import (JointScores, PwdScorer, NativeIouScorer, refine_iou, semantic_score, joint_score,
                                target_scores, iou_loss, select_best)
