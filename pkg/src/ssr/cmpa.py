"""Cross-modal prototype alignment.

Two structurally identical projection heads (stacked linear + batch norm +
ReLU, L2-normalized output) map image patch features and text features into
a shared low-dimensional space. Prototypes are k-means centroids of the
pooled foreground features per modality, refreshed periodically; the
contrastive loss pulls each sample toward the prototype of its cluster
pseudo-label (cross-modally, in both directions) and pushes it from the
rest, with a learnable temperature stored as log_tau.

All gradients are hand-derived (see layers.py) and optimized with AdamW
using decoupled weight decay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import layers, tensor_io
from .clustering import kmeans_assign, kmeans_fit
from .evaluation import cam_to_pseudo_label


class NumericError(Exception):
    """Non-finite value encountered during optimization."""


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class LayerParams:
    weight: np.ndarray  # [d_out, d_in]
    bias: np.ndarray    # [d_out]
    bn: BatchNormParams | None = None


@dataclass
class ProjectionHead:
    layers: list[LayerParams]

    @property
    def d_in(self):
        return self.layers[0].weight.shape[1]

    @property
    def d_out(self):
        return self.layers[-1].weight.shape[0]


def init_projection_head(d_in, d_out, hidden=None, seed=0):
    """Stacked linear layers with BN + ReLU between them (none after the
    last). Default shape: d_in -> d_in//2 -> d_out."""
    if hidden is None:
        hidden = [max(d_out, d_in // 2)]
    dims = [d_in] + list(hidden) + [d_out]
    rng = np.random.default_rng(seed)
    params = []
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i]))
        b = np.zeros(dims[i + 1])
        bn = None
        if i < len(dims) - 2:
            bn = BatchNormParams(
                gamma=np.ones(dims[i + 1]),
                beta=np.zeros(dims[i + 1]),
                running_mean=np.zeros(dims[i + 1]),
                running_var=np.ones(dims[i + 1]),
            )
        params.append(LayerParams(weight=w, bias=b, bn=bn))
    return ProjectionHead(layers=params)


def project_forward(head, x, mode):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.d_in:
        raise ValueError(f"input must be [n, {head.d_in}], got shape {x.shape}")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError(f"train mode needs n >= 2 rows, got {x.shape[0]}")
    caches = []
    out = x
    last = len(head.layers) - 1
    for i, lp in enumerate(head.layers):
        out, lin_cache = layers.linear_forward(out, lp.weight, lp.bias)
        bn_cache = relu_cache = None
        if i != last:
            out, bn_cache = layers.batchnorm_forward(
                out, lp.bn.gamma, lp.bn.beta, lp.bn.running_mean, lp.bn.running_var,
                lp.bn.momentum, lp.bn.eps, mode,
            )
            out, relu_cache = layers.relu_forward(out)
        caches.append((lin_cache, bn_cache, relu_cache))
    out, norm_cache = layers.l2_normalize_forward(out)
    return out, (caches, norm_cache)


def project(head, x, mode="eval"):
    """Project rows through the head; output rows are L2-normalized."""
    out, _ = project_forward(head, x, mode)
    return out


def project_backward(head, cache, dout):
    """Returns (dx, grads) with grads keyed 'layers.{i}.weight' etc."""
    caches, norm_cache = cache
    grads = {}
    d = layers.l2_normalize_backward(dout, norm_cache)
    last = len(head.layers) - 1
    for i in range(last, -1, -1):
        lin_cache, bn_cache, relu_cache = caches[i]
        if i != last:
            d = layers.relu_backward(d, relu_cache)
            d, dgamma, dbeta = layers.batchnorm_backward(d, bn_cache)
            grads[f"layers.{i}.bn.gamma"] = dgamma
            grads[f"layers.{i}.bn.beta"] = dbeta
        d, dw, db = layers.linear_backward(d, lin_cache)
        grads[f"layers.{i}.weight"] = dw
        grads[f"layers.{i}.bias"] = db
    return d, grads


def masked_average_pool_forward(cam_c, feats):
    cam_c = np.asarray(cam_c, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    denom = max(float(cam_c.sum()), 1e-8)
    pooled = (cam_c @ feats) / denom
    out, norm_cache = layers.l2_normalize_forward(pooled[None, :])
    return out[0], (cam_c, denom, norm_cache)


def masked_average_pool(cam_c, feats):
    """CAM-weighted mean of feature rows, L2-normalized (Eq.-style MAP)."""
    out, _ = masked_average_pool_forward(cam_c, feats)
    return out


def masked_average_pool_backward(dout, cache):
    cam_c, denom, norm_cache = cache
    dpooled = layers.l2_normalize_backward(dout[None, :], norm_cache)[0]
    return cam_c[:, None] * (dpooled[None, :] / denom)


def _normalize_rows(x):
    norms = np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), 1e-12)
    return x / norms


@dataclass
class PrototypeBank:
    p_image: np.ndarray  # [K, d2], unit rows
    p_text: np.ndarray   # [K, d2], unit rows, row k corresponds to p_image[k]
    k: int
    refresh_interval: int = 5000
    last_refresh_iter: int = 0


def refresh_prototypes(f_image, f_text, k, seed=0, refresh_interval=5000, last_refresh_iter=0):
    """K-means both modalities independently, then align text clusters to
    image clusters by Hungarian assignment on the co-membership counts
    (pairs shared between image-cluster i and text-cluster j)."""
    f_image = np.asarray(f_image, dtype=np.float64)
    f_text = np.asarray(f_text, dtype=np.float64)
    if f_image.shape[0] != f_text.shape[0]:
        raise ValueError("image/text pair counts differ")
    if f_image.shape[0] < k:
        raise ValueError(f"need at least K={k} pairs, got {f_image.shape[0]}")
    model_img = kmeans_fit(f_image, k, seed=seed)
    model_txt = kmeans_fit(f_text, k, seed=seed)
    li = kmeans_assign(model_img, f_image)
    lt = kmeans_assign(model_txt, f_text)
    contingency = np.zeros((k, k), dtype=np.int64)
    np.add.at(contingency, (li, lt), 1)
    _, col = linear_sum_assignment(-contingency)
    return PrototypeBank(
        p_image=_normalize_rows(model_img.centroids),
        p_text=_normalize_rows(model_txt.centroids[col]),
        k=k,
        refresh_interval=refresh_interval,
        last_refresh_iter=last_refresh_iter,
    )


def pseudo_labels(f, p):
    """label[i] = argmax_k <f_i, p_k> (unit rows assumed; ties -> lowest k)."""
    return np.argmax(np.asarray(f) @ np.asarray(p).T, axis=1)


def prototype_logits(v, p, tau):
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return (np.asarray(v, dtype=np.float64) @ np.asarray(p, dtype=np.float64).T) / tau


def proto_loss(logits, pos_idx):
    """Mean cross-entropy of each row against its positive prototype index.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    pos_idx = np.asarray(pos_idx)
    n, k = logits.shape
    if ((pos_idx < 0) | (pos_idx >= k)).any():
        raise ValueError(f"pos_idx outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(logp[np.arange(n), pos_idx].mean())
    grad = np.exp(logp)
    grad[np.arange(n), pos_idx] -= 1.0
    return loss, grad / n


def seg_loss(logits, pseudo_mask, ignore_index=255):
    """Mean pixel cross-entropy; pixels labeled ignore_index contribute
    nothing. Returns (loss, grad_logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(pseudo_mask)
    c = logits.shape[0]
    if logits.shape[1:] != mask.shape:
        raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
    bad = (mask != ignore_index) & ((mask < 0) | (mask >= c))
    if bad.any():
        raise ValueError(f"mask labels outside [0, {c}) at {int(bad.sum())} pixels")
    valid = mask != ignore_index
    nvalid = int(valid.sum())
    if nvalid == 0:
        return 0.0, np.zeros_like(logits)
    flat = logits.reshape(c, -1)
    shifted = flat - flat.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logz
    vmask = valid.ravel()
    targets = mask.ravel()[vmask]
    cols = np.flatnonzero(vmask)
    loss = -float(logp[targets, cols].sum()) / nvalid
    grad = np.zeros_like(flat)
    grad[:, cols] = np.exp(logp[:, cols])
    grad[targets, cols] -= 1.0
    grad /= nvalid
    return loss, grad.reshape(logits.shape)


def total_loss(l_proto, l_seg, gamma):
    return l_proto + gamma * l_seg


@dataclass
class AdamWOpt:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_update(params, grads, opt, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place AdamW with decoupled weight decay on every parameter."""
    opt.t += 1
    bc1 = 1.0 - beta1**opt.t
    bc2 = 1.0 - beta2**opt.t
    for name, p in params.items():
        g = grads[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m = opt.m[name]
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * weight_decay * p  # decoupled decay of the pre-step value
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class AlignmentState:
    isa: ProjectionHead
    tsa: ProjectionHead
    log_tau: np.ndarray            # scalar; tau = exp(log_tau) > 0 always
    seg_probe: LayerParams | None
    opt: AdamWOpt
    prototypes: PrototypeBank | None = None
    iteration: int = 0
    seed: int = 0

    def parameters(self):
        out = {}
        for prefix, head in (("isa", self.isa), ("tsa", self.tsa)):
            for i, lp in enumerate(head.layers):
                out[f"{prefix}.layers.{i}.weight"] = lp.weight
                out[f"{prefix}.layers.{i}.bias"] = lp.bias
                if lp.bn is not None:
                    out[f"{prefix}.layers.{i}.bn.gamma"] = lp.bn.gamma
                    out[f"{prefix}.layers.{i}.bn.beta"] = lp.bn.beta
        out["log_tau"] = self.log_tau
        if self.seg_probe is not None:
            out["seg.weight"] = self.seg_probe.weight
            out["seg.bias"] = self.seg_probe.bias
        return out

    @property
    def tau(self):
        return float(np.exp(self.log_tau))


def init_alignment_state(d1, num_classes, d2=None, hidden=None, tau_init=0.05,
                         seed=0, with_seg_probe=True):
    if d2 is None:
        d2 = max(2, d1 // 4)
    if hidden is None:
        hidden = [max(d2, d1 // 2)]
    rng = np.random.default_rng(seed)
    isa = init_projection_head(d1, d2, hidden, seed=int(rng.integers(2**31)))
    tsa = init_projection_head(d1, d2, hidden, seed=int(rng.integers(2**31)))
    seg = None
    if with_seg_probe:
        w = rng.normal(0.0, np.sqrt(1.0 / d1), size=(num_classes + 1, d1))
        seg = LayerParams(weight=w, bias=np.zeros(num_classes + 1))
    return AlignmentState(
        isa=isa,
        tsa=tsa,
        log_tau=np.array(np.log(tau_init), dtype=np.float64),
        seg_probe=seg,
        opt=AdamWOpt(),
        seed=seed,
    )


def collect_pairs(manifest, state, bundles=None):
    """Pooled image feature + projected text feature for every (image,
    present class) pair, using eval-mode heads.

    Returns (f_image [n_pairs, d2], f_text [n_pairs, d2], class_of_pair).
    """
    if bundles is None:
        bundles = [tensor_io.load_bundle(manifest, e) for e in manifest.entries]
    f_image, f_text, class_of_pair = [], [], []
    for b in bundles:
        proj = project(state.isa, b.clip_feat, mode="eval")
        txt = project(state.tsa, b.text_feat, mode="eval")
        cam_flat = b.cam_seed.reshape(len(b.labels), -1)
        for ci, cls in enumerate(b.labels):
            f_image.append(masked_average_pool(cam_flat[ci], proj))
            f_text.append(txt[ci])
            class_of_pair.append(cls)
    return np.array(f_image), np.array(f_text), np.array(class_of_pair, dtype=np.int64)


def _param_norm_report(state):
    return ", ".join(
        f"{name}={float(np.sqrt((p * p).sum())):.3e}" for name, p in state.parameters().items()
    )


def train_step(state, batch, *, lr=1e-5, weight_decay=2e-3, gamma=0.1,
               bg_thresh=0.45, pair_source=None):
    """One AdamW step over a batch of FeatureBundles.

    The contrastive loss runs in both cross-modal directions (image features
    vs text prototypes and text features vs image prototypes) so both heads
    receive gradients. Prototypes refresh through pair_source once
    iteration - last_refresh_iter reaches the bank's interval. Mutates and
    returns state; raises NumericError (step aborted) on non-finite loss.
    """
    if state.prototypes is None:
        raise ValueError("prototypes not initialized; refresh before training")
    bank = state.prototypes

    x_img = np.concatenate([b.clip_feat for b in batch], axis=0)
    img_out, img_cache = project_forward(state.isa, x_img, "train")

    pool_caches = []
    f_img_rows = []
    txt_rows = []
    row_slices = []
    offset = 0
    for b in batch:
        n = b.clip_feat.shape[0]
        cam_flat = b.cam_seed.reshape(len(b.labels), -1)
        for ci in range(len(b.labels)):
            pooled, cache = masked_average_pool_forward(cam_flat[ci], img_out[offset:offset + n])
            f_img_rows.append(pooled)
            pool_caches.append(cache)
            row_slices.append((offset, offset + n))
            txt_rows.append(b.text_feat[ci])
        offset += n
    f_img = np.array(f_img_rows)
    x_txt = np.array(txt_rows)
    f_txt, txt_cache = project_forward(state.tsa, x_txt, "train")

    tau = float(np.exp(state.log_tau))
    if not np.isfinite(tau) or tau <= 0.0:
        raise NumericError(
            f"temperature collapsed (tau={tau}) at iteration {state.iteration}; "
            "parameter norms: " + _param_norm_report(state)
        )
    logits_img = prototype_logits(f_img, bank.p_text, tau)
    logits_txt = prototype_logits(f_txt, bank.p_image, tau)
    pos_img = pseudo_labels(f_img, bank.p_image)
    pos_txt = pseudo_labels(f_txt, bank.p_text)
    l_img, g_img = proto_loss(logits_img, pos_img)
    l_txt, g_txt = proto_loss(logits_txt, pos_txt)
    l_proto = 0.5 * (l_img + l_txt)
    g_img = 0.5 * g_img
    g_txt = 0.5 * g_txt

    l_seg = 0.0
    seg_grads = None
    if gamma != 0.0 and state.seg_probe is not None:
        dw = np.zeros_like(state.seg_probe.weight)
        db = np.zeros_like(state.seg_probe.bias)
        for b in batch:
            h, w = b.patch_grid
            seg_logits = (b.clip_feat @ state.seg_probe.weight.T + state.seg_probe.bias)
            seg_logits = seg_logits.T.reshape(-1, h, w)
            pmask = cam_to_pseudo_label(b.cam_seed, b.labels, bg_thresh=bg_thresh)
            li, gi = seg_loss(seg_logits, pmask)
            l_seg += li / len(batch)
            gflat = gi.reshape(gi.shape[0], -1) / len(batch)
            dw += gflat @ b.clip_feat
            db += gflat.sum(axis=1)
        seg_grads = (dw, db)

    loss = total_loss(l_proto, l_seg, gamma)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss at iteration {state.iteration}; parameter norms: "
            + _param_norm_report(state)
        )

    # temperature: logits = S / tau, d logits / d log_tau = -logits
    dlog_tau = -(g_img * logits_img).sum() - (g_txt * logits_txt).sum()
    df_img = g_img @ bank.p_text / tau
    df_txt = g_txt @ bank.p_image / tau

    dx_img_out = np.zeros_like(img_out)
    for row, (cache, (start, stop)) in enumerate(zip(pool_caches, row_slices)):
        dx_img_out[start:stop] += masked_average_pool_backward(df_img[row], cache)
    _, isa_grads = project_backward(state.isa, img_cache, dx_img_out)
    _, tsa_grads = project_backward(state.tsa, txt_cache, df_txt)

    grads = {f"isa.{k}": v for k, v in isa_grads.items()}
    grads.update({f"tsa.{k}": v for k, v in tsa_grads.items()})
    grads["log_tau"] = np.array(dlog_tau)
    if state.seg_probe is not None:
        if seg_grads is None:
            grads["seg.weight"] = np.zeros_like(state.seg_probe.weight)
            grads["seg.bias"] = np.zeros_like(state.seg_probe.bias)
        else:
            grads["seg.weight"] = gamma * seg_grads[0]
            grads["seg.bias"] = gamma * seg_grads[1]

    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NumericError(
            f"non-finite gradient for {bad} at iteration {state.iteration}; "
            "parameter norms: " + _param_norm_report(state)
        )

    adamw_update(state.parameters(), grads, state.opt, lr, weight_decay)
    state.iteration += 1

    if pair_source is not None and state.iteration - bank.last_refresh_iter >= bank.refresh_interval:
        f_i, f_t, _ = pair_source(state)
        state.prototypes = refresh_prototypes(
            f_i, f_t, bank.k, seed=state.seed,
            refresh_interval=bank.refresh_interval,
            last_refresh_iter=state.iteration,
        )
    return state, loss, l_proto, l_seg


def train_align(manifest, *, iters, batch_size=128, lr=1e-5, weight_decay=2e-3,
                gamma=0.1, tau_init=0.05, refresh_interval=5000, k=None,
                seed=0, bg_thresh=0.45, d2=None, hidden=None, bundles=None):
    """Full alignment loop over a manifest. Returns (state, loss_history)."""
    if bundles is None:
        bundles = [tensor_io.load_bundle(manifest, e) for e in manifest.entries]
    if not bundles:
        raise ValueError("manifest has no entries")
    if k is None:
        k = manifest.num_foreground
    d1 = bundles[0].clip_feat.shape[1]
    state = init_alignment_state(
        d1, manifest.num_foreground, d2=d2, hidden=hidden, tau_init=tau_init, seed=seed,
        with_seg_probe=gamma != 0.0,
    )

    def pair_source(st):
        return collect_pairs(manifest, st, bundles=bundles)

    f_i, f_t, _ = pair_source(state)
    state.prototypes = refresh_prototypes(
        f_i, f_t, k, seed=seed, refresh_interval=refresh_interval, last_refresh_iter=0
    )

    rng = np.random.default_rng(seed)
    batch_size = max(1, min(batch_size, len(bundles)))
    order = []
    history = []
    for _ in range(iters):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(bundles)).tolist())
        picks, order = order[:batch_size], order[batch_size:]
        batch = [bundles[i] for i in picks]
        state, loss, l_proto, l_seg = train_step(
            state, batch, lr=lr, weight_decay=weight_decay, gamma=gamma,
            bg_thresh=bg_thresh, pair_source=pair_source,
        )
        history.append({"loss": loss, "proto": l_proto, "seg": l_seg})
    return state, history


def save_checkpoint(state, out_dir):
    """Parameters, BN running stats, optimizer moments, and prototype bank
    as .npy files plus a JSON metadata record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = dict(state.parameters())
    for prefix, head in (("isa", state.isa), ("tsa", state.tsa)):
        for i, lp in enumerate(head.layers):
            if lp.bn is not None:
                arrays[f"{prefix}.layers.{i}.bn.running_mean"] = lp.bn.running_mean
                arrays[f"{prefix}.layers.{i}.bn.running_var"] = lp.bn.running_var
    for name, m in state.opt.m.items():
        arrays[f"opt.m.{name}"] = m
        arrays[f"opt.v.{name}"] = state.opt.v[name]
    if state.prototypes is not None:
        arrays["prototypes.p_image"] = state.prototypes.p_image
        arrays["prototypes.p_text"] = state.prototypes.p_text
    for name, arr in arrays.items():
        tensor_io.save_tensor(np.asarray(arr, dtype=np.float64), out_dir / f"{name}.npy")

    meta = {
        "iteration": state.iteration,
        "seed": state.seed,
        "opt_t": state.opt.t,
        "isa_dims": [list(lp.weight.shape) for lp in state.isa.layers],
        "tsa_dims": [list(lp.weight.shape) for lp in state.tsa.layers],
        "has_seg_probe": state.seg_probe is not None,
        "prototypes": None
        if state.prototypes is None
        else {
            "k": state.prototypes.k,
            "refresh_interval": state.prototypes.refresh_interval,
            "last_refresh_iter": state.prototypes.last_refresh_iter,
        },
    }
    with open(out_dir / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "checkpoint.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)

    def arr(name):
        return np.array(tensor_io.load_tensor(ckpt_dir / f"{name}.npy"), dtype=np.float64)

    def head(prefix, dims):
        lps = []
        for i, (d_out, _) in enumerate(dims):
            bn = None
            if i < len(dims) - 1:
                bn = BatchNormParams(
                    gamma=arr(f"{prefix}.layers.{i}.bn.gamma"),
                    beta=arr(f"{prefix}.layers.{i}.bn.beta"),
                    running_mean=arr(f"{prefix}.layers.{i}.bn.running_mean"),
                    running_var=arr(f"{prefix}.layers.{i}.bn.running_var"),
                )
            lps.append(LayerParams(weight=arr(f"{prefix}.layers.{i}.weight"),
                                   bias=arr(f"{prefix}.layers.{i}.bias"), bn=bn))
        return ProjectionHead(layers=lps)

    state = AlignmentState(
        isa=head("isa", meta["isa_dims"]),
        tsa=head("tsa", meta["tsa_dims"]),
        log_tau=arr("log_tau"),
        seg_probe=LayerParams(weight=arr("seg.weight"), bias=arr("seg.bias"))
        if meta["has_seg_probe"]
        else None,
        opt=AdamWOpt(t=meta["opt_t"]),
        iteration=meta["iteration"],
        seed=meta["seed"],
    )
    for path in sorted(ckpt_dir.glob("opt.m.*.npy")):
        name = path.name[len("opt.m."):-len(".npy")]
        state.opt.m[name] = arr(f"opt.m.{name}")
        state.opt.v[name] = arr(f"opt.v.{name}")
    if meta["prototypes"] is not None:
        state.prototypes = PrototypeBank(
            p_image=arr("prototypes.p_image"),
            p_text=arr("prototypes.p_text"),
            k=meta["prototypes"]["k"],
            refresh_interval=meta["prototypes"]["refresh_interval"],
            last_refresh_iter=meta["prototypes"]["last_refresh_iter"],
        )
    return state
