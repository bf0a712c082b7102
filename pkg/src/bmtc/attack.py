"""Background-guided PGD with the temporal gradient-consistency term.

The loop runs on a batch of clips at once.  Every per-clip loss depends on
its own clip only (the toy models have no batch coupling), so the gradient
of the summed loss gives each clip its own gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttackAborted, CapabilityError, ContractError
from .mixer import admix_tensor
from .models import clips_to_tensor
from .tensors import AttackConfig, VideoClip, project_linf

COS_FLOOR = 1e-12


def background_attack_loss(logits: torch.Tensor, true_label, background_category) -> torch.Tensor:
    """``log p_c - log p_y`` from softmax(logits), averaged over leading dims.

    Rising values move probability toward background class ``c`` and away
    from the true class ``y``.  ``background_category`` may be one category
    or one per frame; several categories are averaged.
    """
    if logits.ndim == 1:
        logits = logits[None]
    cats = torch.as_tensor(np.atleast_1d(np.asarray(background_category)), dtype=torch.long)
    if (cats == int(true_label)).any():
        raise ContractError("background category must differ from the true label")
    logp = torch.log_softmax(logits, dim=-1)
    return (logp[..., cats].mean(dim=-1) - logp[..., int(true_label)]).mean()


def batch_background_loss(logits: torch.Tensor, labels: torch.Tensor, cats: torch.Tensor) -> torch.Tensor:
    """Per-clip background loss; ``cats`` is (N, T) per-frame categories."""
    logp = torch.log_softmax(logits, dim=-1)
    return logp.gather(1, cats).mean(dim=1) - logp.gather(1, labels[:, None]).squeeze(1)


def tgc_loss(gradients) -> torch.Tensor:
    """Mean cosine between consecutive flattened frame gradients.

    ``gradients`` is (T, D) or batched (N, T, D); batched input yields one
    value per clip.  Fewer than two frames gives 0.
    """
    g = gradients if isinstance(gradients, torch.Tensor) else torch.as_tensor(np.asarray(gradients))
    squeeze = g.ndim == 2
    if squeeze:
        g = g[None]
    if g.shape[1] < 2:
        out = torch.zeros(g.shape[0], dtype=g.dtype)
        return out[0] if squeeze else out
    a, b = g[:, :-1], g[:, 1:]
    denom = (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(COS_FLOOR)
    cos = (a * b).sum(dim=-1) / denom
    out = cos.mean(dim=1)
    return out[0] if squeeze else out


def frame_cosines(gradients: torch.Tensor) -> torch.Tensor:
    """(N, T, D) -> (N, T-1) consecutive-frame cosines."""
    a, b = gradients[:, :-1], gradients[:, 1:]
    return (a * b).sum(dim=-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(COS_FLOOR)


def total_attack_loss(l_back, l_tgc, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ContractError("beta must lie in [0, 1]")
    return l_back + beta * l_tgc


def _logits(model, x):
    forward = getattr(model, "grad_logits", None)
    return forward(x) if forward is not None else model(x)


def frame_gradients(model, adversarial, label, background_category, k=None, create_graph=False):
    """Gradient of the background loss w.r.t. each frame, flattened: (T, H*W*C).

    One backward pass over the whole clip, sliced per frame.
    """
    x = adversarial.frames if isinstance(adversarial, VideoClip) else adversarial
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x,
                        dtype=torch.get_default_dtype()).detach().requires_grad_(True)
    logits = _logits(model, x[None])
    if k is not None:
        logits = logits[:, :k]
    loss = background_attack_loss(logits[0], label, background_category)
    if not loss.requires_grad:
        raise CapabilityError("model output does not depend differentiably on the input")
    (g,) = torch.autograd.grad(loss, x, create_graph=create_graph)
    return g.reshape(g.shape[0], -1)


@dataclass
class LossBreakdown:
    l_back: float
    l_tgc: float
    l_total: float
    per_frame_grad_cosines: list
    linf: float = 0.0
    p_background: float = float("nan")
    p_true: float = float("nan")

    @property
    def mean_grad_cosine(self) -> float:
        return float(np.mean(self.per_frame_grad_cosines)) if self.per_frame_grad_cosines else 0.0


@dataclass
class AttackResult:
    adversarial: VideoClip
    iterations_run: int
    loss_trace: list
    success_by_model: dict = field(default_factory=dict)
    linf_used: float = 0.0

    def trace_records(self):
        return [
            {"iter": i, "l_back": b.l_back, "l_tgc": b.l_tgc, "l_total": b.l_total,
             "linf": b.linf, "mean_grad_cosine": b.mean_grad_cosine}
            for i, b in enumerate(self.loss_trace)
        ]

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace_records())


def _loss_and_grad(model, x_adv, labels, cats, beta, tgc_grad, k, loss_kind):
    """Objective gradient w.r.t. ``x_adv`` plus the per-clip diagnostics."""
    x = x_adv.detach().requires_grad_(True)
    logits = _logits(model, x)
    if k is not None:
        logits = logits[:, :k]
    if loss_kind == "ce":
        l_back = F.cross_entropy(logits, labels, reduction="none")
    else:
        l_back = batch_background_loss(logits, labels, cats)
    n, t = x.shape[:2]
    exact = loss_kind == "background" and beta > 0 and tgc_grad == "double_backprop" and t >= 2
    (g,) = torch.autograd.grad(l_back.sum(), x, create_graph=exact)
    g_flat = g.reshape(n, t, -1)
    l_tgc = tgc_loss(g_flat) if t >= 2 else torch.zeros(n, dtype=g.dtype)
    if exact:
        l_total = l_back + beta * l_tgc
        (grad,) = torch.autograd.grad(l_total.sum(), x)
    else:
        l_total = l_back + (beta * l_tgc if loss_kind == "background" else 0.0)
        grad = g
    with torch.no_grad():
        probs = torch.softmax(logits.detach(), dim=-1)
        p_bg = probs.gather(1, cats).mean(dim=1) if cats is not None else torch.full((n,), float("nan"))
        p_true = probs.gather(1, labels[:, None]).squeeze(1)
        cos = frame_cosines(g_flat.detach()) if t >= 2 else torch.zeros(n, 0)
    return grad.detach(), l_back.detach(), l_tgc.detach(), l_total.detach(), cos, p_bg, p_true


def attack_batch(model, x_clean: torch.Tensor, labels, cats=None, config: AttackConfig = None,
                 x_init: torch.Tensor = None, loss_kind: str = "background", momentum: float = None,
                 k: int = None, beta: float = None, on_iterate=None):
    """Run the projected sign-gradient ascent on a batch.

    Returns ``(x_adv, traces)`` where ``traces[n]`` is the list of
    LossBreakdowns of clip ``n``, one per evaluated iterate.  The loss is
    logged at every iterate X^0 .. X^{n_iter}; the last entry carries no
    step.  ``momentum`` switches to MI-style accumulation of L1-normalized
    gradients with that decay.  ``on_iterate(i, x_adv)`` sees every iterate.
    """
    config = config or AttackConfig()
    beta = config.beta if beta is None else beta
    labels = torch.as_tensor(labels, dtype=torch.long)
    if cats is not None:
        cats = torch.as_tensor(np.asarray(cats), dtype=torch.long)
        if cats.ndim == 1:
            cats = cats[:, None].expand(-1, x_clean.shape[1])
        if (cats == labels[:, None]).any():
            raise ContractError("background category must differ from the true label")
    elif loss_kind == "background":
        raise ContractError("the background loss needs background categories")
    x_clean = x_clean.detach()
    start = x_clean if x_init is None else x_init.detach()
    x_adv = project_linf(start, x_clean, config.epsilon)
    n = x_clean.shape[0]
    traces = [[] for _ in range(n)]
    accum = torch.zeros_like(x_clean)
    for i in range(config.n_iter + 1):
        if on_iterate is not None:
            on_iterate(i, x_adv)
        grad, lb, lt, ltot, cos, p_bg, p_true = _loss_and_grad(
            model, x_adv, labels, cats, beta, config.tgc_grad, k, loss_kind)
        linf = (x_adv - x_clean).abs().reshape(n, -1).amax(dim=1)
        for j in range(n):
            traces[j].append(LossBreakdown(float(lb[j]), float(lt[j]), float(ltot[j]), cos[j].tolist(),
                                           float(linf[j]), float(p_bg[j]), float(p_true[j])))
        if not torch.isfinite(ltot).all() or not torch.isfinite(grad).all():
            raise AttackAborted(f"non-finite loss at iteration {i}", traces[0])
        if i == config.n_iter:
            break
        if momentum is not None:
            norm = grad.abs().reshape(n, -1).sum(dim=1).clamp_min(COS_FLOOR)
            accum = momentum * accum + grad / norm.reshape(n, *([1] * (grad.ndim - 1)))
            grad = accum
        x_adv = project_linf(x_adv + config.eta * torch.sign(grad), x_clean, config.epsilon)
    return x_adv.detach(), traces


def selected_backgrounds(pool, selection) -> np.ndarray:
    """T x H x W x C stack of the pool frames chosen per frame."""
    return pool.frames()[np.asarray(selection.indices)]


def generate_adversarial(clip: VideoClip, selection, pool, surrogate, config: AttackConfig = None,
                         model_id: str = "surrogate") -> AttackResult:
    """BMTC attack on one clip: project the admixed clip, then ascend L_total."""
    config = config or AttackConfig()
    k = pool.k
    x = clips_to_tensor([clip])
    back = torch.as_tensor(selected_backgrounds(pool, selection), dtype=x.dtype)[None]
    x0 = admix_tensor(x, back, config.gamma)
    cats = torch.as_tensor(selection.indices, dtype=torch.long)[None]
    x_adv, traces = attack_batch(surrogate, x, [clip.label], cats, config, x_init=x0, k=k)
    return _result(clip, x_adv[0], traces[0], config, surrogate, model_id, k)


def _result(clip, x_adv, trace, config, surrogate, model_id, k):
    frames = x_adv.numpy()
    with torch.no_grad():
        model = getattr(surrogate, "model", surrogate)
        pred = int(model(x_adv[None])[0, :k].argmax())
    linf = float(np.abs(frames - clip.frames).max())
    adv = VideoClip(frames.astype(clip.frames.dtype), clip.label, clip.clip_id)
    return AttackResult(adv, config.n_iter, trace, {model_id: pred != clip.label}, linf)


def pgd_baseline(clip: VideoClip, surrogate, config: AttackConfig = None, k: int = None,
                 model_id: str = "surrogate") -> AttackResult:
    """Plain PGD on the true-label cross-entropy: no mixup, no temporal term."""
    config = config or AttackConfig()
    x = clips_to_tensor([clip])
    x_adv, traces = attack_batch(surrogate, x, [clip.label], None, config, loss_kind="ce", k=k, beta=0.0)
    return _result(clip, x_adv[0], traces[0], config, surrogate, model_id, k)


def mi_baseline(clip: VideoClip, surrogate, config: AttackConfig = None, k: int = None, decay: float = 1.0,
                model_id: str = "surrogate") -> AttackResult:
    """Momentum-accumulated variant of :func:`pgd_baseline`."""
    config = config or AttackConfig()
    x = clips_to_tensor([clip])
    x_adv, traces = attack_batch(surrogate, x, [clip.label], None, config, loss_kind="ce", k=k, beta=0.0,
                                 momentum=decay)
    return _result(clip, x_adv[0], traces[0], config, surrogate, model_id, k)


def breakdown_dict(b: LossBreakdown) -> dict:
    return asdict(b)
