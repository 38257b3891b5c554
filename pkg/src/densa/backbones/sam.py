"""
Adapter for the real foundation models: SAM (image encoder + mask decoder) and a DINOv2 patch feature extractor.

torch and segment_anything are optional dependencies (extra `real`) and are imported on first use only.

"""

import os
import logging
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np

from densa.backbones.base import Backend, BackendCaps, BackendUnavailableError, DecodeResult, FeatureMap, SceneImage
from densa.geometry.boxes import BoxXYXY
from densa.geometry.masks import resize_array
from densa.geometry.prompts import PromptSet

logger = logging.getLogger(__name__)

SAM_TOKEN_CHANNELS = 256
SAM_LOWRES = 256
DINO_PATCH_SIZE = 14
DINO_CHANNELS = {'dinov2_vits14': 384, 'dinov2_vitb14': 768, 'dinov2_vitl14': 1024, 'dinov2_vitg14': 1536}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def _import_torch():
    try:
        import torch
    except ImportError as exc:
        err_msg = "The real backend needs 'torch', install densa with the 'real' extra."
        raise BackendUnavailableError(err_msg) from exc
    return torch


@dataclass(frozen=True, eq=False)
class SamContext:
    """ Decoder state of one encoded image. """
    embedding: Any
    original_size: Tuple[int, int]
    input_size: Tuple[int, int]


class SamDinoBackend(Backend):
    """
    SAM and DINOv2 behind the backend interface.

    The IoU token and the four mask tokens are read from the output of the decoder's two-way transformer, i.e. the
    same tokens the decoder feeds into its IoU prediction head and its hyper-networks.

    """

    def __init__(self, sam_checkpoint, sam_model_type='vit_l', dino_model='dinov2_vitl14', dino_repo=None,
                 device='cpu'):
        """
        Constructor of `SamDinoBackend`.

        Parameters
        ----------
        sam_checkpoint : str
            Path to the SAM weights.
        sam_model_type : str, optional
            Key of the SAM model registry (default 'vit_l').
        dino_model : str, optional
            DINOv2 hub entry point (default 'dinov2_vitl14').
        dino_repo : str, optional
            Local clone of the DINOv2 hub repository. Defaults to the remote 'facebookresearch/dinov2'.
        device : str, optional
            Torch device (default 'cpu').

        """
        torch = _import_torch()
        try:
            from segment_anything import sam_model_registry, SamPredictor
        except ImportError as exc:
            err_msg = "The real backend needs 'segment_anything', install densa with the 'real' extra."
            raise BackendUnavailableError(err_msg) from exc
        if not sam_checkpoint or not os.path.exists(sam_checkpoint):
            err_msg = f"SAM weights '{sam_checkpoint}' not found."
            raise BackendUnavailableError(err_msg)
        if dino_model not in DINO_CHANNELS:
            err_msg = f"DINOv2 model '{dino_model}' not known, use one of {sorted(DINO_CHANNELS)}."
            raise ValueError(err_msg)

        self._torch = torch
        self.device = device
        sam = sam_model_registry[sam_model_type](checkpoint=sam_checkpoint).to(device).eval()
        self._predictor = SamPredictor(sam)
        try:
            if dino_repo is None:
                self._dino = torch.hub.load('facebookresearch/dinov2', dino_model)
            else:
                self._dino = torch.hub.load(dino_repo, dino_model, source='local')
        except Exception as exc:
            err_msg = f"DINOv2 model '{dino_model}' could not be loaded: {exc}"
            raise BackendUnavailableError(err_msg) from exc
        self._dino = self._dino.to(device).eval()

        self._hs = None
        sam.mask_decoder.transformer.register_forward_hook(self._tap_tokens)
        self._caps = BackendCaps(patch_size=DINO_PATCH_SIZE, token_channels=SAM_TOKEN_CHANNELS,
                                 feature_channels=DINO_CHANNELS[dino_model], native_mask_resolution=SAM_LOWRES)

    @property
    def caps(self) -> BackendCaps:
        return self._caps

    def _tap_tokens(self, module, inputs, outputs):
        self._hs = outputs[0]

    def encode_image(self, image: SceneImage) -> FeatureMap:
        with self._torch.no_grad():
            self._predictor.set_image(image.pixels)
            embedding = self._predictor.get_image_embedding()
        context = SamContext(embedding, self._predictor.original_size, self._predictor.input_size)
        data = embedding[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)
        return FeatureMap(data, image.size, context)

    def extract_semantic_features(self, image: SceneImage) -> FeatureMap:
        torch = self._torch
        h, w = self._caps.grid_shape(*image.size)
        pixels = (image.pixels.astype(np.float64) / 255. - IMAGENET_MEAN) / IMAGENET_STD
        x = torch.as_tensor(pixels.transpose(2, 0, 1)[None], dtype=torch.float32, device=self.device)
        x = torch.nn.functional.interpolate(x, size=(h * DINO_PATCH_SIZE, w * DINO_PATCH_SIZE), mode='bilinear',
                                            align_corners=False)
        with torch.no_grad():
            tokens = self._dino.forward_features(x)['x_norm_patchtokens']
        data = tokens[0].reshape(h, w, -1).cpu().numpy().astype(np.float64)
        return FeatureMap(data, image.size)

    def _context(self, feat) -> SamContext:
        if not isinstance(feat.context, SamContext):
            err_msg = "Feature map was not produced by a SAM backend."
            raise ValueError(err_msg)
        return feat.context

    def _decode(self, context, points=None, labels=None, boxes=None):
        torch = self._torch
        sam = self._predictor.model
        with torch.no_grad():
            sparse, dense = sam.prompt_encoder(points=None if points is None else (points, labels), boxes=boxes,
                                               masks=None)
            masks, iou_pred = sam.mask_decoder.predict_masks(image_embeddings=context.embedding,
                                                             image_pe=sam.prompt_encoder.get_dense_pe(),
                                                             sparse_prompt_embeddings=sparse,
                                                             dense_prompt_embeddings=dense)
        n_tokens = sam.mask_decoder.num_mask_tokens
        iou_token = self._hs[:, 0:1, :]
        mask_tokens = self._hs[:, 1:1 + n_tokens, :]
        # low-res logits cover the padded encoder input; cut to the image part
        valid_h = int(np.ceil(context.input_size[0] * SAM_LOWRES / sam.image_encoder.img_size))
        valid_w = int(np.ceil(context.input_size[1] * SAM_LOWRES / sam.image_encoder.img_size))
        masks = masks[..., :valid_h, :valid_w].cpu().numpy().astype(np.float64)
        masks = resize_array(masks, SAM_LOWRES, SAM_LOWRES, 'bilinear')
        return (masks, mask_tokens.cpu().numpy().astype(np.float64), iou_token.cpu().numpy().astype(np.float64),
                iou_pred.cpu().numpy().astype(np.float64))

    def decode_prompts(self, feat: FeatureMap, prompts: PromptSet) -> DecodeResult:
        torch = self._torch
        context = self._context(feat)
        self._check_prompts(feat, prompts)
        coords = self._predictor.transform.apply_coords(prompts.xy, context.original_size)
        points = torch.as_tensor(coords[:, None, :], dtype=torch.float32, device=self.device)
        labels = torch.ones((len(prompts), 1), dtype=torch.int64, device=self.device)
        masks, mask_tokens, iou_token, native_iou = self._decode(context, points, labels)
        return DecodeResult(masks, mask_tokens, iou_token, np.clip(native_iou, 0., 1.), feat.image_size)

    def decode_box_prompt(self, feat: FeatureMap, box: BoxXYXY) -> np.ndarray:
        torch = self._torch
        context = self._context(feat)
        self._check_box(box)
        coords = self._predictor.transform.apply_boxes(box.to_array()[None, :], context.original_size)
        boxes = torch.as_tensor(coords, dtype=torch.float32, device=self.device)
        masks = self._decode(context, boxes=boxes)[0]
        # single-mask output of SAM is the first mask token
        best = masks[0, 0]
        height, width = feat.image_size
        return resize_array(best, height, width, 'bilinear') > 0.
