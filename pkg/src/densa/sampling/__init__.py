from densa.sampling.eps import (EpsConfig, EpsResult, EpsTrace, ScoredMask, SamplerError, eps_sample, full_sampler,
                                random_sampler, score_prompts, scored_masks)
