"""Initialization, Adam optimization, the epoch loop and checkpointing."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backbone_unet as bb
from . import evidential_head as ev
from . import objectives as obj
from .seeding import derive_seed
from .tensor_core import Tensor
from .volume_io import CT_NORM, PET_NORM, PatientCase, normalize

CKPT_MAGIC = b"EVIDCKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable failure during training."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    lam: float = 1e-5
    prototypes: int = 20
    alpha_init: float = 0.5
    gamma_init: float = 0.01
    batch_size: int = 2
    patch_dims: tuple = (32, 32, 32)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dice_mode: str = "pignistic"
    lesion_patch_fraction: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.prototypes < 1:
            raise ValueError("need at least one prototype")
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError("alpha_init must lie in (0, 1)")
        if self.gamma_init < 0:
            raise ValueError("gamma_init must be nonnegative")
        if self.dice_mode not in obj.DICE_MODES:
            raise ValueError(f"unknown dice mode {self.dice_mode!r}")
        self.patch_dims = tuple(int(d) for d in self.patch_dims)


def init_es_params(config: TrainConfig, feature_dim: int, seed: int,
                   dtype=np.float32) -> ev.EsParams:
    """Uniform random prototypes/memberships; alpha and gamma at constants."""
    rng = np.random.default_rng(seed)
    i = config.prototypes
    a = config.alpha_init
    return ev.EsParams(
        prototypes=rng.uniform(-1.0, 1.0, size=(i, feature_dim)).astype(dtype),
        membership_logits=rng.uniform(-0.1, 0.1, size=(i, ev.K)).astype(dtype),
        alpha_logits=np.full(i, np.log(a / (1.0 - a)), dtype=dtype),
        gamma_roots=np.full(i, np.sqrt(config.gamma_init), dtype=dtype),
    )


# -- model wrapper ---------------------------------------------------------

@dataclass
class Model:
    """Backbone plus either the evidential head or a softmax baseline head."""
    backbone_config: bb.BackboneConfig
    head: str  # "evidential" | "softmax"
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, backbone_config: bb.BackboneConfig, head: str,
               train_config: TrainConfig, seed: int, dtype=np.float32):
        if head not in ("evidential", "softmax"):
            raise ValueError(f"unknown head {head!r}")
        params = init_backbone(backbone_config, derive_seed(seed, "backbone"),
                               dtype=dtype)
        c = backbone_config.feature_dim
        if head == "evidential":
            es = init_es_params(train_config, c, derive_seed(seed, "es"), dtype)
            params.update(es.as_dict())
        else:
            rng = np.random.default_rng(derive_seed(seed, "softmax-head"))
            bound = np.sqrt(6.0 / c)
            params["head.w"] = rng.uniform(-bound, bound,
                                           size=(2, c, 1, 1, 1)).astype(dtype)
            params["head.b"] = np.zeros(2, dtype=dtype)
        return cls(backbone_config, head, params)

    def forward(self, x: np.ndarray, trainable: bool = False) -> Tensor:
        """(N, 2, X, Y, Z) input -> (N, 3, X, Y, Z) mass map tensor.

        The softmax head emits pseudo-masses (p_a, p_b, 0) so both heads
        share the decision and metric paths.
        """
        leaves = {k: Tensor(v, requires_grad=trainable)
                  for k, v in self.params.items()}
        xt = Tensor(np.asarray(x, dtype=self.dtype))
        feats = bb.forward_features(leaves, xt, self.backbone_config)
        if self.head == "evidential":
            out = ev.es_forward(feats, leaves)
        else:
            from .tensor_core import concat, conv3d
            logits = conv3d(feats, leaves["head.w"], leaves["head.b"])
            shift = logits.data.max(axis=1, keepdims=True)
            e = (logits - shift).exp()
            p = e / e.sum(axis=1, keepdims=True)
            zero = Tensor(np.zeros((x.shape[0], 1) + x.shape[2:], dtype=self.dtype))
            out = concat([p, zero], axis=1)
        return out, leaves

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def predict_masses(self, x: np.ndarray) -> np.ndarray:
        """(N, 2, X, Y, Z) -> (N, X, Y, Z, 3) numpy mass maps."""
        out, _ = self.forward(x, trainable=False)
        return out.data.transpose(0, 2, 3, 4, 1)

    def es_params(self) -> ev.EsParams:
        if self.head != "evidential":
            raise ValueError("model has no evidential head")
        return ev.EsParams(
            prototypes=self.params["es.prototypes"],
            membership_logits=self.params["es.membership_logits"],
            alpha_logits=self.params["es.alpha_logits"],
            gamma_roots=self.params["es.gamma_roots"],
        )


def init_backbone(config, seed, dtype=np.float32):
    return bb.init_backbone(config, seed, dtype=dtype)


# -- Adam ------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}


def adam_step(params: dict, grads: dict, state: dict, t: int,
              config: TrainConfig):
    """Standard bias-corrected Adam update, in place on `params`."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    b1, b2, eps = config.beta1, config.beta2, config.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m, v = state[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[name] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (config.lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# -- data preparation ------------------------------------------------------

def prepare_case(case: PatientCase, dtype=np.float32):
    """Normalize PET/CT, stack to a 2-channel input, binarize the mask."""
    pet = normalize(case.pet, PET_NORM).voxels.astype(dtype)
    ct = normalize(case.ct, CT_NORM).voxels.astype(dtype)
    x = bb.concat_modalities(pet, ct)
    g = case.mask.voxels.astype(dtype)
    return x, g


def sample_patch(x: np.ndarray, g: np.ndarray, patch_dims, rng,
                 want_lesion: bool):
    """Random crop; when `want_lesion`, center the patch on a lesion voxel."""
    dims = x.shape[1:]
    if tuple(dims) == tuple(patch_dims):
        return x, g
    lo = []
    if want_lesion and g.any():
        target = rng.choice(np.flatnonzero(g))
        tx = np.unravel_index(target, dims)
        for d, p, t in zip(dims, patch_dims, tx):
            c = int(np.clip(t - p // 2, 0, d - p))
            lo.append(c)
    else:
        for d, p in zip(dims, patch_dims):
            lo.append(int(rng.integers(0, d - p + 1)))
    sl = tuple(slice(c, c + p) for c, p in zip(lo, patch_dims))
    return x[(slice(None),) + sl], g[sl]


# -- checkpointing ---------------------------------------------------------

def save_checkpoint(path, model: Model, config: TrainConfig, epoch: int):
    tensors, offset, blobs = [], 0, []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "version": CKPT_VERSION,
        "epoch": epoch,
        "head": model.head,
        "backbone_channels": list(model.backbone_config.channels),
        "in_channels": model.backbone_config.in_channels,
        "config": {**config.__dict__, "patch_dims": list(config.patch_dims)},
        "tensors": tensors,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header["version"] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{header['version']}")
    blob = raw[12 + hlen:]
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValueError(f"{path}: blob truncated at tensor "
                             f"{spec['name']!r}")
        params[spec["name"]] = np.frombuffer(
            blob[start:end], dtype="<f4").reshape(shape).copy()
    if len(blob) != sum(4 * int(np.prod(t["shape"]))
                        for t in header["tensors"]):
        raise ValueError(f"{path}: blob length does not match manifest")
    cfg_dict = dict(header["config"])
    config = TrainConfig(**cfg_dict)
    backbone_config = bb.BackboneConfig(
        channels=tuple(header["backbone_channels"]),
        in_channels=header["in_channels"])
    model = Model(backbone_config, header["head"], params)
    _validate_params(model)
    return model, config, header["epoch"]


def _validate_params(model: Model):
    expected = {}
    for name, shape in bb._conv_shapes(model.backbone_config):
        expected[f"{name}.w"] = shape
        expected[f"{name}.b"] = (shape[0],)
    for name, shape in expected.items():
        if name not in model.params:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if model.params[name].shape != shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape "
                f"{model.params[name].shape}, expected {shape}")


# -- training loop ---------------------------------------------------------

def validation_stats(model: Model, val_data, dice_fn):
    """Mean binary Dice and mean ignorance mass over validation cases."""
    dices, ign = [], []
    for x, g in val_data:
        masses = model.predict_masses(x[None])[0]
        binary, _, _ = ev.decide(masses)
        dices.append(dice_fn(binary, g))
        ign.append(float(masses[..., ev.IGNORANCE].mean()))
    return float(np.mean(dices)), float(np.mean(ign))


def _binary_dice(pred, truth):
    inter = float((pred * truth).sum())
    denom = float(pred.sum() + truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def train(model: Model, train_cases, val_cases, config: TrainConfig,
          gradcheck_gate: bool = True, log_fn=None):
    """Optimize `model` in place; returns (best_params, epoch_log).

    The epoch log is a list of dicts with the loss breakdown, validation
    Dice and validation mean ignorance per epoch. Model selection is by
    best validation Dice.
    """
    if not train_cases or not val_cases:
        raise TrainingError("empty train or validation split")
    if gradcheck_gate:
        from .gradcheck import run_gate
        failures = run_gate()
        if failures:
            raise TrainingError(
                "gradient-check gate failed: " + ", ".join(failures))
    train_data = [prepare_case(c) for c in train_cases]
    val_data = [prepare_case(c) for c in val_cases]
    rng = np.random.default_rng(derive_seed(config.seed, "train-loop"))
    state = adam_init(model.params)
    log, best = [], (-1.0, None, -1)
    t = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_data))
        sums = {"loss_d": 0.0, "loss_u": 0.0, "loss_reg": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xs, gs = [], []
            for i in idx:
                x, g = train_data[i]
                want = rng.random() < config.lesion_patch_fraction
                px, pg = sample_patch(x, g, config.patch_dims, rng, want)
                xs.append(px)
                gs.append(pg)
            xb = np.stack(xs)
            gb = np.stack(gs)
            out, leaves = model.forward(xb, trainable=True)
            if model.head == "evidential":
                total, breakdown = obj.total_loss(
                    out, gb, leaves["es.alpha_logits"],
                    lam=config.lam, dice_mode=config.dice_mode)
            else:
                n = out.shape[0]
                s = obj.lesion_map(out, "singleton").reshape(n, -1)
                total = obj.dice_loss(s, gb.reshape(n, -1))
                breakdown = obj.LossBreakdown(
                    float(total.data), 0.0, 0.0, float(total.data))
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {t + 1}: "
                    f"{breakdown.as_dict()}")
            total.backward()
            grads = {k: (leaves[k].grad if leaves[k].grad is not None
                         else np.zeros_like(leaves[k].data))
                     for k in model.params}
            t += 1
            adam_step(model.params, grads, state, t, config)
            for k, v in breakdown.as_dict().items():
                sums[k] += v
            n_batches += 1
        if model.head == "evidential":
            _assert_constraints(model.es_params())
        val_dice, val_ign = validation_stats(model, val_data, _binary_dice)
        record = {"epoch": epoch,
                  **{k: v / n_batches for k, v in sums.items()},
                  "val_dice": val_dice, "val_mean_ignorance": val_ign}
        log.append(record)
        if log_fn:
            log_fn(record)
        if val_dice > best[0]:
            best = (val_dice, {k: v.copy() for k, v in model.params.items()},
                    epoch)
    best_dice, best_params, best_epoch = best
    return best_params, best_epoch, log


def _assert_constraints(es: ev.EsParams):
    u = es.memberships
    if not np.allclose(u.sum(axis=1), 1.0, atol=1e-5):
        raise TrainingError("membership degrees no longer sum to 1")
    a = es.alphas
    if np.any(a <= 0) or np.any(a >= 1):
        raise TrainingError("alpha left the open interval (0, 1)")
