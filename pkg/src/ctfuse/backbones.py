"""Model branches: 3D residual CNN and 2.5D slice encoder with multi-view fusion.

The 3D branch follows the 18-layer video-style residual layout (4 stages x 2
basic blocks, 3D kernels) with a single-channel stem and width scaling. The
2.5D branch wraps a slice encoder (a builtin small vision transformer, or
externally converted pretrained weights in the same checkpoint format) behind
one interface, with per-view mean pooling, concatenation, and a learned
projection as the fusion step.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class Model3DCfg:
    n_classes: int = 2
    width_multiplier: float = 1.0
    in_channels: int = 1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")

    @property
    def embedding_dim(self) -> int:
        return int(512 * self.width_multiplier)


@dataclass
class Encoder25DCfg:
    backbone_kind: str = "builtin_small_transformer"
    patch_size: int = 16
    depth: int = 4
    embedding_dim: int = 64
    n_heads: int = 4
    n_layer_groups: int = 2
    projection_dim: int = 64
    n_classes: int = 2
    pooling: str = "cls"  # or "mean"
    weights_path: str | None = None  # for backbone_kind == "external_pretrained"

    def __post_init__(self):
        if self.backbone_kind not in ("builtin_small_transformer", "external_pretrained"):
            raise ValueError(f"unknown backbone kind {self.backbone_kind!r}")
        if self.n_layer_groups < 2:
            raise ValueError("n_layer_groups must be >= 2")
        if self.pooling not in ("cls", "mean"):
            raise ValueError("pooling must be 'cls' or 'mean'")


@dataclass
class BranchOutput:
    embedding: torch.Tensor
    logits: torch.Tensor


class BasicBlock3d(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv3d(inplanes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(planes)
        self.conv2 = nn.Conv3d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(planes)
        self.downsample = downsample

    def forward(self, x):
        identity = x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return F.relu(out + identity)


class ResNet3D(nn.Module):
    """18-layer video-style residual network with a 1-channel stem."""

    def __init__(self, cfg: Model3DCfg):
        super().__init__()
        self.cfg = cfg
        widths = [int(w * cfg.width_multiplier) for w in (64, 128, 256, 512)]
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.in_channels, widths[0], kernel_size=(3, 7, 7),
                      stride=(1, 2, 2), padding=(1, 3, 3), bias=False),
            nn.BatchNorm3d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.inplanes = widths[0]
        self.layer1 = self._make_layer(widths[0], stride=1)
        self.layer2 = self._make_layer(widths[1], stride=2)
        self.layer3 = self._make_layer(widths[2], stride=2)
        self.layer4 = self._make_layer(widths[3], stride=2)
        self.fc = nn.Linear(widths[3], cfg.n_classes)
        self.contrast_head = nn.Sequential(
            nn.Linear(widths[3], widths[3]), nn.ReLU(inplace=True),
            nn.Linear(widths[3], min(128, widths[3])),
        )

    def _make_layer(self, planes, stride):
        downsample = None
        if stride != 1 or self.inplanes != planes:
            downsample = nn.Sequential(
                nn.Conv3d(self.inplanes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm3d(planes),
            )
        layers = [BasicBlock3d(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes
        layers.append(BasicBlock3d(planes, planes))
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> BranchOutput:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected batch of shape B x {self.cfg.in_channels} x D x H x W, got {tuple(x.shape)}"
            )
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        emb = x.mean(dim=(2, 3, 4))
        return BranchOutput(embedding=emb, logits=self.fc(emb))

    def contrast_embedding(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.contrast_head(embedding)


class TransformerBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class SliceEncoder(nn.Module):
    """Small vision transformer over 3-channel slices."""

    def __init__(self, cfg: Encoder25DCfg, slice_size: int):
        super().__init__()
        if slice_size % cfg.patch_size != 0:
            raise ValueError(f"slice size {slice_size} not divisible by patch size {cfg.patch_size}")
        self.cfg = cfg
        n_patches = (slice_size // cfg.patch_size) ** 2
        dim = cfg.embedding_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, cfg.n_heads) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 3, S, S) -> (B, dim)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        if self.cfg.pooling == "cls":
            return tokens[:, 0]
        return tokens[:, 1:].mean(dim=1)

    def layer_groups(self) -> list[list[nn.Parameter]]:
        """Backbone parameters split into n_layer_groups ordered bottom-to-top."""
        n_groups = self.cfg.n_layer_groups
        groups: list[list[nn.Parameter]] = [[] for _ in range(n_groups)]
        groups[0] += [self.cls_token, self.pos_embed]
        groups[0] += list(self.patch_embed.parameters())
        for i, blk in enumerate(self.blocks):
            g = min(i * n_groups // max(len(self.blocks), 1), n_groups - 1)
            groups[g] += list(blk.parameters())
        groups[-1] += list(self.norm.parameters())
        return groups


class MultiView25D(nn.Module):
    """Slice encoder + per-view mean pooling + concat + projection + linear head."""

    def __init__(self, cfg: Encoder25DCfg, slice_size: int):
        super().__init__()
        self.cfg = cfg
        self.slice_size = slice_size
        self.encoder = SliceEncoder(cfg, slice_size)
        if cfg.backbone_kind == "external_pretrained":
            if cfg.weights_path is None:
                raise ValueError("external_pretrained requires weights_path")
            load_encoder_weights(self.encoder, cfg.weights_path)
        dim = cfg.embedding_dim
        self.fusion = nn.Sequential(nn.Linear(3 * dim, cfg.projection_dim), nn.GELU())
        self.head = nn.Linear(cfg.projection_dim, cfg.n_classes)
        self.contrast_head = nn.Sequential(
            nn.Linear(cfg.projection_dim, cfg.projection_dim), nn.ReLU(inplace=True),
            nn.Linear(cfg.projection_dim, min(128, cfg.projection_dim)),
        )

    def encode_slice(self, prepared_slice: torch.Tensor) -> torch.Tensor:
        if prepared_slice.ndim == 3:
            prepared_slice = prepared_slice[None]
        return self.encoder(prepared_slice)

    def fuse_views(self, view_embeddings: torch.Tensor) -> torch.Tensor:
        """(B, 3, K, E) -> (B, projection_dim): mean over K, concat views, project."""
        if view_embeddings.shape[2] == 0:
            raise ValueError("view with zero slices")
        pooled = view_embeddings.mean(dim=2)  # (B, 3, E)
        concat = pooled.flatten(1)
        return self.fusion(concat)

    def classify(self, fused: torch.Tensor) -> torch.Tensor:
        return self.head(fused)

    def forward(self, x: torch.Tensor) -> BranchOutput:
        # x: (B, 3 views, K, 3 channels, S, S)
        b, v, k = x.shape[:3]
        flat = x.reshape(b * v * k, *x.shape[3:])
        emb = self.encoder(flat).reshape(b, v, k, -1)
        fused = self.fuse_views(emb)
        return BranchOutput(embedding=fused, logits=self.head(fused))

    def contrast_embedding(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.contrast_head(embedding)

    def set_trainable_stage(self, stage_id: int) -> None:
        """1: backbone frozen; 2: top half of layer groups unfrozen; 3: all trainable."""
        if stage_id not in (1, 2, 3):
            raise ValueError(f"unknown stage {stage_id}")
        for p in self.parameters():
            p.requires_grad_(True)
        groups = self.encoder.layer_groups()
        n = len(groups)
        if stage_id == 1:
            frozen = groups
        elif stage_id == 2:
            frozen = groups[: n // 2 + (n % 2)]  # keep bottom half (rounding up) frozen
        else:
            frozen = []
        for g in frozen:
            for p in g:
                p.requires_grad_(False)

    def backbone_parameters(self):
        return self.encoder.parameters()


def set_trainable_stage(model: nn.Module, stage_id: int) -> None:
    if isinstance(model, MultiView25D):
        model.set_trainable_stage(stage_id)
    elif isinstance(model, ResNet3D):
        if stage_id not in (1, 2, 3):
            raise ValueError(f"unknown stage {stage_id}")
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")


# --- checkpoint archive -----------------------------------------------------
#
# Zip archive: meta.json (config echo, stage metadata, tensor index with
# shapes) plus one raw little-endian float32 blob per parameter.


def save_checkpoint(model: nn.Module, cfg, path: Path | str, meta: dict | None = None) -> None:
    path = Path(path)
    state = model.state_dict()
    index = {name: list(t.shape) for name, t in state.items()}
    header = {
        "config": asdict(cfg) if cfg is not None else None,
        "model_class": type(model).__name__,
        "meta": meta or {},
        "tensors": index,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(header, indent=2))
        for name, t in state.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            zf.writestr(f"tensors/{name}.f32", arr.tobytes())


def load_checkpoint(path: Path | str) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("meta.json"))
        tensors = {}
        for name, shape in header["tensors"].items():
            raw = zf.read(f"tensors/{name}.f32")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
    return header, tensors


def load_model_weights(model: nn.Module, path: Path | str) -> dict:
    header, tensors = load_checkpoint(path)
    target = model.state_dict()
    converted = {k: v.to(target[k].dtype) if k in target else v for k, v in tensors.items()}
    model.load_state_dict(converted)
    return header


def load_encoder_weights(encoder: SliceEncoder, path: Path | str) -> dict:
    """Ingest external pretrained slice-encoder weights from the archive format."""
    return load_model_weights(encoder, path)
