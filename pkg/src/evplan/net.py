"""Evidential planner network: factorized-attention encoder, per-step error
regression, and flow-based evidence per candidate anchor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from evplan import autodiff as ad
from evplan.anchors import AnchorSet
from evplan.features import (
    AGENT_FEATURES,
    ANCHOR_FEATURES,
    EGO_FEATURES,
    MAP_FEATURES,
    Batch,
    FeatureCaps,
    collate,
    scene_features,
)
from evplan.flows import flow_log_density, init_flow
from evplan.scene import Scene

ALPHA_FLOOR = 1e-6
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class NetConfig:
    d: int = 64
    n_heads: int = 2
    n_hist_blocks: int = 2
    n_joint_blocks: int = 2
    d_flow: int = 8
    n_flow_layers: int = 6
    n_budget: float = 1.0
    w_mse: float = 8.0
    w_uce: float = 1.0
    lambda_ent: float = 1e-5
    uce_prior: float = 0.0  # per-class pseudo-count added to n before normalizing in the loss
    H: int = 4
    F: int = 6
    K: int = 40
    max_agents: int = 8
    max_map_elements: int = 24
    max_map_points: int = 16
    ffn_mult: int = 2
    latent_bound: float = 4.0  # z = bound * tanh(.); 0 leaves the latent unbounded
    compute_dtype: str = "float64"  # float32 roughly halves training time

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.d_flow < 2:
            raise ValueError("d_flow must be at least 2")
        if not self.n_budget > 0:
            raise ValueError("n_budget must be positive")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")

    @property
    def caps(self) -> FeatureCaps:
        return FeatureCaps(self.max_agents, self.max_map_elements, self.max_map_points)

    @property
    def n_tokens(self) -> int:
        return self.H + 1 + self.F

    def to_dict(self) -> dict:
        return asdict(self)


def _block_shapes(prefix: str, d: int, ffn: int, with_map: bool = True):
    shapes = []
    for part in ("time", "agent") + (("map",) if with_map else ()):
        shapes += [
            (f"{prefix}.{part}.ln_g", (d,), "ones"),
            (f"{prefix}.{part}.ln_b", (d,), "zeros"),
            (f"{prefix}.{part}.wq", (d, d), "fan_in"),
            (f"{prefix}.{part}.wk", (d, d), "fan_in"),
            (f"{prefix}.{part}.wv", (d, d), "fan_in"),
            (f"{prefix}.{part}.wo", (d, d), "fan_in"),
            (f"{prefix}.{part}.bo", (d,), "zeros"),
        ]
    shapes += [
        (f"{prefix}.ffn.ln_g", (d,), "ones"),
        (f"{prefix}.ffn.ln_b", (d,), "zeros"),
        (f"{prefix}.ffn.w1", (d, ffn * d), "fan_in"),
        (f"{prefix}.ffn.b1", (ffn * d,), "zeros"),
        (f"{prefix}.ffn.w2", (ffn * d, d), "fan_in"),
        (f"{prefix}.ffn.b2", (d,), "zeros"),
    ]
    return shapes


def param_shapes(cfg: NetConfig):
    d = cfg.d
    shapes = [
        ("ego_in.w", (EGO_FEATURES, d), "fan_in"),
        ("ego_in.b", (d,), "zeros"),
        ("agent_in.w", (AGENT_FEATURES, d), "fan_in"),
        ("agent_in.b", (d,), "zeros"),
        ("anchor_in.w", (ANCHOR_FEATURES, d), "fan_in"),
        ("anchor_in.b", (d,), "zeros"),
        ("time_emb", (cfg.n_tokens, d), "small"),
        ("map_pt.w1", (MAP_FEATURES, d), "fan_in"),
        ("map_pt.b1", (d,), "zeros"),
        ("map_pt.w2", (d, d), "fan_in"),
        ("map_pt.b2", (d,), "zeros"),
        ("map_ln.g", (d,), "ones"),
        ("map_ln.b", (d,), "zeros"),
    ]
    for i in range(cfg.n_hist_blocks):
        shapes += _block_shapes(f"hist{i}", d, cfg.ffn_mult)
    for i in range(cfg.n_joint_blocks):
        shapes += _block_shapes(f"joint{i}", d, cfg.ffn_mult)
    shapes += [
        ("out_ln.g", (d,), "ones"),
        ("out_ln.b", (d,), "zeros"),
        ("reg.w1", (d, d), "fan_in"),
        ("reg.b1", (d,), "zeros"),
        ("reg.w2", (d, 2), "head"),
        ("reg.b2", (2,), "zeros"),
        ("lat.w1", (d, d), "fan_in"),
        ("lat.b1", (d,), "zeros"),
        ("lat.w2", (d, cfg.d_flow), "head"),
        ("lat.b2", (cfg.d_flow,), "zeros"),
        ("flow.centers", (cfg.n_flow_layers, cfg.d_flow), "flow_centers"),
        ("flow.a_raw", (cfg.n_flow_layers,), "flow_a"),
        ("flow.b_raw", (cfg.n_flow_layers,), "flow_b"),
    ]
    return shapes


class NetParams:
    """All weights in one flat float64 vector, with named array views into it."""

    def __init__(self, cfg: NetConfig, flat: np.ndarray):
        self.cfg = cfg
        self.layout = [(name, shape) for name, shape, _ in param_shapes(cfg)]
        sizes = [int(np.prod(s)) for _, s in self.layout]
        if len(flat) != sum(sizes):
            raise ValueError(f"flat vector has {len(flat)} entries, expected {sum(sizes)}")
        self.flat = np.ascontiguousarray(flat, dtype=float)
        self.views = {}
        offset = 0
        for (name, shape), n in zip(self.layout, sizes):
            self.views[name] = self.flat[offset : offset + n].reshape(shape)
            offset += n

    @property
    def size(self) -> int:
        return len(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, self.flat.copy())

    def tensors(self, grad: Optional[np.ndarray] = None, dtype=np.float64) -> dict[str, ad.Tensor]:
        """Leaf tensors; with ``grad`` given, gradients accumulate into its matching views."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            value = self.views[name] if dtype == np.float64 else self.views[name].astype(dtype)
            if grad is None:
                out[name] = ad.Tensor(value)
            else:
                out[name] = ad.Tensor(value, requires_grad=True, grad_buffer=grad[offset : offset + n].reshape(shape))
            offset += n
        return out


def init_params(cfg: NetConfig, seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)
    centers, a_raw, b_raw = init_flow(rng, cfg.d_flow, cfg.n_flow_layers)
    chunks = []
    for name, shape, kind in param_shapes(cfg):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "fan_in":
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif kind == "head":
            arr = 0.1 * rng.standard_normal(shape) / np.sqrt(shape[0])
        elif kind == "small":
            arr = 0.1 * rng.standard_normal(shape)
        elif kind == "flow_centers":
            arr = centers
        elif kind == "flow_a":
            arr = a_raw
        elif kind == "flow_b":
            arr = b_raw
        else:
            raise AssertionError(kind)
        chunks.append(np.asarray(arr, dtype=float).ravel())
    return NetParams(cfg, np.concatenate(chunks))


# --- forward -------------------------------------------------------------------


def _attend(p, prefix, x, context, key_mask, n_heads, self_attn):
    h = ad.layer_norm(x, p[prefix + ".ln_g"], p[prefix + ".ln_b"])
    ctx = h if self_attn else context
    q = ad.linear(h, p[prefix + ".wq"])
    k = ad.linear(ctx, p[prefix + ".wk"])
    v = ad.linear(ctx, p[prefix + ".wv"])
    a = ad.attention(q, k, v, key_mask, n_heads)
    return x + ad.linear(a, p[prefix + ".wo"], p[prefix + ".bo"])


def _ffn(p, prefix, x):
    h = ad.layer_norm(x, p[prefix + ".ln_g"], p[prefix + ".ln_b"])
    h = ad.gelu(ad.linear(h, p[prefix + ".w1"], p[prefix + ".b1"]))
    return x + ad.linear(h, p[prefix + ".w2"], p[prefix + ".b2"])


def _encode_map(p, batch: Batch) -> ad.Tensor:
    """PointNet: shared per-point MLP then max over each element's points."""
    pts = ad.Tensor(batch.map_points)
    h = ad.gelu(ad.linear(pts, p["map_pt.w1"], p["map_pt.b1"]))
    h = ad.linear(h, p["map_pt.w2"], p["map_pt.b2"])
    pooled = ad.masked_max(h, batch.point_mask[..., None], axis=2)  # (B, M, d)
    return ad.layer_norm(pooled, p["map_ln.g"], p["map_ln.b"])


def encode_batch(p: dict, cfg: NetConfig, batch: Batch) -> ad.Tensor:
    """Features (B, K, H+1+F, d); candidates never attend to one another."""
    b, k, f = batch.anchors.shape[:3]
    h1 = batch.ego.shape[1]
    a = batch.agents.shape[1]
    d = cfg.d
    if h1 + f != cfg.n_tokens or k < 1:
        raise ValueError("batch shape does not match the network configuration")
    nh = cfg.n_heads
    tpos = p["time_emb"]

    map_feat = _encode_map(p, batch)
    map_mask = batch.map_mask  # (B, M)

    # history stack over [ego, agents]: (B, 1+A, H+1, d)
    ego = ad.linear(ad.Tensor(batch.ego), p["ego_in.w"], p["ego_in.b"])
    agents = ad.linear(ad.Tensor(batch.agents), p["agent_in.w"], p["agent_in.b"])
    x = ad.concat([ad.reshape(ego, (b, 1, h1, d)), agents], axis=1)
    x = x + ad.getitem(tpos, slice(0, h1))
    actor_mask = np.concatenate([np.ones((b, 1), dtype=bool), batch.agent_mask], axis=1)  # (B, 1+A)
    for i in range(cfg.n_hist_blocks):
        pre = f"hist{i}"
        x = _attend(p, pre + ".time", x, None, None, nh, True)
        xt = ad.transpose(x, (0, 2, 1, 3))  # (B, H+1, 1+A, d)
        xt = _attend(p, pre + ".agent", xt, None, actor_mask[:, None, :], nh, True)
        x = ad.transpose(xt, (0, 2, 1, 3))
        flat = ad.reshape(x, (b, (1 + a) * h1, d))
        flat = _attend(p, pre + ".map", flat, map_feat, map_mask, nh, False)
        x = ad.reshape(_ffn(p, pre + ".ffn", flat), (b, 1 + a, h1, d))

    ego_hist = ad.getitem(x, (slice(None), slice(0, 1)))  # (B, 1, H+1, d)
    agent_ctx = ad.getitem(x, (slice(None), slice(1, None)))  # (B, A, H+1, d)
    # joint tokens see agents at their latest observed step
    steps = np.minimum(np.arange(cfg.n_tokens), h1 - 1)
    agent_ctx = ad.transpose(ad.take(agent_ctx, steps, axis=2), (0, 2, 1, 3))  # (B, T, A, d)
    agent_ctx = ad.reshape(agent_ctx, (b, 1, cfg.n_tokens, a, d))
    agent_mask = batch.agent_mask[:, None, None, :]  # (B, 1, 1, A)

    fut = ad.linear(ad.Tensor(batch.anchors), p["anchor_in.w"], p["anchor_in.b"])  # (B, K, F, d)
    fut = fut + ad.getitem(tpos, slice(h1, None))
    z = ad.concat([ad.broadcast_to(ego_hist, (b, k, h1, d)), fut], axis=2)  # (B, K, T, d)
    t = cfg.n_tokens
    for i in range(cfg.n_joint_blocks):
        pre = f"joint{i}"
        z = _attend(p, pre + ".time", z, None, None, nh, True)
        q = ad.reshape(z, (b, k, t, 1, d))
        ag = pre + ".agent"
        hq = ad.layer_norm(q, p[ag + ".ln_g"], p[ag + ".ln_b"])
        kk = ad.linear(agent_ctx, p[ag + ".wk"])
        vv = ad.linear(agent_ctx, p[ag + ".wv"])
        att = ad.attention(ad.linear(hq, p[ag + ".wq"]), kk, vv, agent_mask, nh)
        q = q + ad.linear(att, p[ag + ".wo"], p[ag + ".bo"])
        flat = ad.reshape(q, (b, k * t, d))
        flat = _attend(p, pre + ".map", flat, map_feat, map_mask, nh, False)
        z = ad.reshape(_ffn(p, pre + ".ffn", flat), (b, k, t, d))
    return ad.layer_norm(z, p["out_ln.g"], p["out_ln.b"])


@dataclass(frozen=True, eq=False)
class NetOutput:
    error_traces: np.ndarray  # (K, F, 2) metres, world frame
    evidence: np.ndarray  # (K,)
    log_evidence: np.ndarray  # (K,)
    latents: np.ndarray  # (K, d_flow)


def decode_batch(p: dict, cfg: NetConfig, features: ad.Tensor, h1: int):
    """Returns (errors (B, K, F, 2) local frame, log-density (B, K), latents (B, K, d_flow))."""
    fut = ad.getitem(features, (slice(None), slice(None), slice(h1, None)))
    e = ad.gelu(ad.linear(fut, p["reg.w1"], p["reg.b1"]))
    errors = ad.linear(e, p["reg.w2"], p["reg.b2"])
    pooled = ad.mean(features, axis=2)
    u = ad.linear(ad.gelu(ad.linear(pooled, p["lat.w1"], p["lat.b1"])), p["lat.w2"], p["lat.b2"])
    z = cfg.latent_bound * ad.tanh(u * (1.0 / cfg.latent_bound)) if cfg.latent_bound > 0 else u
    logp = flow_log_density(z, p["flow.centers"], p["flow.a_raw"], p["flow.b_raw"])
    return errors, logp, z


def forward_batch(params: NetParams, batch: Batch, grad: Optional[np.ndarray] = None):
    dtype = np.dtype(params.cfg.compute_dtype)
    p = params.tensors(grad, dtype)
    if dtype != np.float64:
        batch = batch.astype(dtype)
    feats = encode_batch(p, params.cfg, batch)
    return decode_batch(p, params.cfg, feats, batch.ego.shape[1])


# --- losses ------------------------------------------------------------------------


def mse_term(errors: ad.Tensor, batch: Batch) -> ad.Tensor:
    """Mean over scenes of the summed squared error of the refined closest anchor."""
    rows = np.arange(batch.size)
    e = ad.getitem(errors, (rows, batch.k_star))  # (B, F, 2)
    anchor = batch.anchor_local[rows, batch.k_star]
    resid = e + (anchor - batch.target_local)
    return ad.mean(ad.sum(resid * resid, axis=(1, 2)))


def dirichlet_entropy(alpha: ad.Tensor) -> ad.Tensor:
    """Differential entropy of Dir(alpha) along the last axis."""
    k = alpha.shape[-1]
    a0 = ad.sum(alpha, axis=-1)
    log_b = ad.sum(ad.gammaln(alpha), axis=-1) - ad.gammaln(a0)
    return log_b + (a0 - k) * ad.digamma(a0) - ad.sum((alpha - 1.0) * ad.digamma(alpha), axis=-1)


def uce_term(
    logp: ad.Tensor, k_star: np.ndarray, n_budget: float, lambda_ent: float, prior: float = 0.0
) -> ad.Tensor:
    """Mean over scenes of sum_k BCE(q_k, 1[k = k*]) - lambda_ent * H(Dir(n)).

    q = (n + prior) / sum(n + prior). With prior = 0 this is n / 1'n and the
    classification part ignores the overall evidence scale.
    """
    b, k = logp.shape
    if prior > 0:
        log_n = ad.reshape(logp + float(np.log(n_budget)), (b, k, 1))
        logits = ad.logsumexp(ad.concat([log_n, ad.Tensor(np.full((b, k, 1), np.log(prior)))], axis=-1), axis=-1)
    else:
        logits = logp
    logq = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), k_star] = 1.0
    q = ad.exp(logq)
    log_not_q = ad.log(ad.clamp_min(1.0 - q, LOG_FLOOR))
    bce = -(ad.sum(logq * onehot, axis=-1) + ad.sum(log_not_q * (1.0 - onehot), axis=-1))
    if lambda_ent == 0.0:
        return ad.mean(bce)
    alpha = ad.clamp_min(ad.exp(logp + np.log(n_budget)), ALPHA_FLOOR)
    return ad.mean(bce - lambda_ent * dirichlet_entropy(alpha))


def total_loss(params: NetParams, batch: Batch, grad: Optional[np.ndarray] = None):
    """Weighted loss Tensor plus its (mse, uce) parts as floats."""
    cfg = params.cfg
    errors, logp, _ = forward_batch(params, batch, grad)
    mse = mse_term(errors, batch)
    uce = uce_term(logp, batch.k_star, cfg.n_budget, cfg.lambda_ent, cfg.uce_prior)
    loss = cfg.w_mse * mse + cfg.w_uce * uce
    return loss, float(mse.data), float(uce.data)


def loss_and_grad(params: NetParams, batch: Batch):
    grad = np.zeros_like(params.flat)
    loss, mse, uce = total_loss(params, batch, grad)
    loss.backward()
    return float(loss.data), mse, uce, grad


# --- single-scene API ---------------------------------------------------------------


def _rotate_to_world(errors_local: np.ndarray, heading: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return errors_local @ rot.T


def infer_batch(params: NetParams, scenes, anchor_sets) -> list[NetOutput]:
    feats = [scene_features(s, a, params.cfg.caps) for s, a in zip(scenes, anchor_sets)]
    batch = collate(feats)
    with ad.no_grad():
        errors, logp, z = forward_batch(params, batch)
    out = []
    log_n = logp.data + np.log(params.cfg.n_budget)
    for i, f in enumerate(feats):
        out.append(
            NetOutput(
                error_traces=_rotate_to_world(errors.data[i], f.frame_heading),
                evidence=np.exp(log_n[i]),
                log_evidence=log_n[i],
                latents=z.data[i],
            )
        )
    return out


def infer(scene: Scene, anchors: AnchorSet, params: NetParams) -> NetOutput:
    return infer_batch(params, [scene], [anchors])[0]


def encode(scene: Scene, anchors: AnchorSet, params: NetParams) -> np.ndarray:
    """Per-candidate features (K, H+1+F, d)."""
    batch = collate([scene_features(scene, anchors, params.cfg.caps)])
    with ad.no_grad():
        return encode_batch(params.tensors(), params.cfg, batch).data[0]


def decode(features: np.ndarray, params: NetParams, frame_heading: float = 0.0) -> NetOutput:
    """Heads applied to features from :func:`encode`; errors rotated by ``frame_heading``."""
    cfg = params.cfg
    with ad.no_grad():
        errors, logp, z = decode_batch(params.tensors(), cfg, ad.Tensor(features[None]), cfg.H + 1)
    log_n = logp.data[0] + np.log(cfg.n_budget)
    return NetOutput(_rotate_to_world(errors.data[0], frame_heading), np.exp(log_n), log_n, z.data[0])


def loss_mse(output: NetOutput, anchors: AnchorSet, ego_future) -> float:
    """Summed squared error of (e^{k*} + T_{k*}) against the ground truth, world frame."""
    if hasattr(ego_future, "positions"):
        ego_future = ego_future.positions
    elif len(ego_future) and hasattr(ego_future[0], "position"):
        ego_future = [s.position for s in ego_future]
    gt = np.asarray(ego_future, dtype=float)
    k_star = int(np.argmin(((anchors.positions - gt[None]) ** 2).sum(axis=(1, 2))))
    resid = output.error_traces[k_star] + anchors.positions[k_star] - gt
    return float((resid**2).sum())


def loss_uce(output: NetOutput, k_star: int, lambda_ent: float = 1e-5) -> float:
    log_n = ad.Tensor(np.asarray(output.log_evidence, dtype=float)[None])
    with ad.no_grad():
        # n_budget folds into log_evidence; q is invariant to it
        return float(uce_term(log_n, np.array([k_star]), 1.0, lambda_ent).data)
