"""Model surface: shared encoder, outer actor-critic, inner planner policy,
and the latent state-transition model.

All forward functions take a ParamSet plus batched inputs [B, ...] and
return graph Values; parameter ownership tags drive loss scoping in the
trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Value
from .rng import stream

N_ACTIONS = 4
ANCHORS = ("previous", "current", "root")

# invocation counter for the latent transition model (planning-cost audits)
_transition_calls = 0


def transition_calls() -> int:
    return _transition_calls


def reset_transition_calls() -> None:
    global _transition_calls
    _transition_calls = 0


@dataclass
class ModelConfig:
    obs_shape: tuple[int, int, int]  # (C, H, W)
    z_dim: int = 128
    h_inner: int = 128
    h_outer: int = 128
    conv_channels: int = 32
    conv_layers: int = 2
    n_actions: int = N_ACTIONS
    kind: str = "dpn"  # dpn | a2c
    transition_residual: str = "selected"  # selected | current
    metric: str = "l1"  # l1 | l2 | cosine | kl

    @property
    def context_dim(self) -> int:
        return 3 * self.z_dim + 1 + self.h_outer


@dataclass
class StateTriplet:
    previous: Value
    current: Value
    root: Value

    def anchors(self) -> list[Value]:
        return [self.previous, self.current, self.root]


def _xavier(rng, fan_in, fan_out, shape, scale=1.0):
    lim = np.sqrt(6.0 / (fan_in + fan_out)) * scale
    return rng.uniform(-lim, lim, size=shape)


def init_params(cfg: ModelConfig, seed) -> ParamSet:
    """Fresh parameters; draw order is fixed so a seed fully determines them."""
    rng = stream(seed, "init")
    ps = ParamSet()
    c, h, w = cfg.obs_shape
    in_ch = c
    for i in range(cfg.conv_layers):
        out_ch = cfg.conv_channels
        ps.add(f"enc_conv{i}_w", _xavier(rng, in_ch * 9, out_ch * 9, (out_ch, in_ch, 3, 3)), "encoder")
        ps.add(f"enc_conv{i}_b", np.zeros(out_ch), "encoder")
        in_ch = out_ch
    flat = in_ch * h * w
    ps.add("enc_fc_w", _xavier(rng, flat, cfg.z_dim, (flat, cfg.z_dim)), "encoder")
    ps.add("enc_fc_b", np.zeros(cfg.z_dim), "encoder")

    ps.add("out_embed_w", _xavier(rng, cfg.z_dim, cfg.h_outer, (cfg.z_dim, cfg.h_outer)), "outer_agent")
    ps.add("out_value_w", np.zeros((cfg.h_outer, 1)), "outer_agent")

    if cfg.kind == "a2c":
        ps.add("out_policy_w", _xavier(rng, cfg.h_outer, cfg.n_actions, (cfg.h_outer, cfg.n_actions), 0.01), "outer_agent")
        return ps

    ps.add("out_plan_w", _xavier(rng, cfg.h_inner, cfg.h_outer, (cfg.h_inner, cfg.h_outer)), "outer_agent")
    ps.add("out_act_w", _xavier(rng, cfg.h_outer, cfg.n_actions, (cfg.h_outer, cfg.n_actions), 0.01), "outer_agent")

    ad.init_gru(ps, "inner_gru_", cfg.context_dim, cfg.h_inner, "inner_agent", rng)
    ps.add("inner_state_w", _xavier(rng, cfg.h_inner, 3, (cfg.h_inner, 3), 0.01), "inner_agent")
    ps.add(
        "inner_action_w",
        _xavier(rng, cfg.z_dim + cfg.h_inner, cfg.n_actions, (cfg.z_dim + cfg.h_inner, cfg.n_actions), 0.01),
        "inner_agent",
    )

    ps.add("trans_state_w", _xavier(rng, cfg.z_dim, cfg.z_dim, (cfg.z_dim, cfg.z_dim), 0.1), "transition_model")
    ps.add(
        "trans_action_w",
        _xavier(rng, cfg.z_dim, cfg.z_dim, (cfg.n_actions, cfg.z_dim, cfg.z_dim), 0.1),
        "transition_model",
    )
    return ps


# ----------------------------------------------------------------- encoder

def encode(ps: ParamSet, obs: np.ndarray, cfg: ModelConfig) -> Value:
    """Observation batch [B,C,H,W] -> embedding batch [B, z_dim]."""
    if obs.ndim == 3:
        obs = obs[None]
    if obs.shape[1:] != cfg.obs_shape:
        raise ValueError(f"observation shape {obs.shape[1:]} != configured {cfg.obs_shape}")
    x = ad.constant(obs)
    for i in range(cfg.conv_layers):
        x = ad.tanh(ad.conv2d(x, ps[f"enc_conv{i}_w"], ps[f"enc_conv{i}_b"], padding=1))
    x = ad.reshape(x, (x.shape[0], -1))
    return ad.tanh(ad.affine(x, ps["enc_fc_w"], ps["enc_fc_b"]))


# ------------------------------------------------------------- outer agent

def outer_hidden(ps: ParamSet, z: Value) -> Value:
    """h = z @ W, no bias, no nonlinearity (a pure linear map)."""
    return ad.affine(z, ps["out_embed_w"])


def value(ps: ParamSet, z: Value) -> Value:
    """Scalar state value per row: [B]."""
    v = ad.affine(outer_hidden(ps, z), ps["out_value_w"])
    return ad.reshape(v, (v.shape[0],))


def act_logits(ps: ParamSet, h_inner_final: Value, h_outer_initial: Value) -> Value:
    """Environment-action logits from the planner summary and the pre-plan hidden."""
    mixed = ad.tanh(ad.add(ad.affine(h_inner_final, ps["out_plan_w"]), h_outer_initial))
    return ad.affine(mixed, ps["out_act_w"])


def baseline_logits(ps: ParamSet, z: Value) -> Value:
    return ad.affine(outer_hidden(ps, z), ps["out_policy_w"])


# ------------------------------------------------------------- inner agent

def ia_update(ps: ParamSet, hidden: Value, triplet: StateTriplet, step_fraction: float, h_current: Value) -> Value:
    """One recurrent update over the planning context
    [z_prev, z_cur, z_root, tau/T, h_outer(z_cur)]."""
    b = hidden.shape[0]
    frac = ad.constant(np.full((b, 1), step_fraction))
    ctx = ad.concat([triplet.previous, triplet.current, triplet.root, frac, h_current])
    return ad.recurrent_cell(ctx, hidden, ps, "inner_gru_")


def state_select_logits(ps: ParamSet, hidden: Value) -> Value:
    return ad.affine(hidden, ps["inner_state_w"])


def action_select_logits(ps: ParamSet, z_star: Value, hidden: Value) -> Value:
    return ad.affine(ad.concat([z_star, hidden]), ps["inner_action_w"])


def select_state(ps: ParamSet, hidden: Value, triplet: StateTriplet, rng, *, hard=True, noise=None, force_index=None):
    """Sample which anchor to expand. Returns (z_star, w) with w the
    (one-hot) selection weights; z_star rows are bit-equal to the chosen
    anchor rows when hard."""
    logits = state_select_logits(ps, hidden)
    w = ad.gumbel_softmax(logits, hard=hard, rng=rng, noise=noise, force_index=force_index)
    z_star = ad.triplet_mix(w, triplet.anchors())
    return z_star, w


def select_action(ps: ParamSet, z_star: Value, hidden: Value, rng, *, hard=True, noise=None, force_index=None) -> Value:
    logits = action_select_logits(ps, z_star, hidden)
    return ad.gumbel_softmax(logits, hard=hard, rng=rng, noise=noise, force_index=force_index)


# --------------------------------------------------------- transition model

def transition(ps: ParamSet, z_sel: Value, a_onehot: Value, base: Value | None = None) -> Value:
    """Latent step: two tanh residuals around the selected state.

    z1 = base + tanh(z_sel @ Wz); z2 = z1 + tanh((a.Wa) z1); out = base + z2.
    ``base`` defaults to z_sel; the alternative residual anchoring (base =
    pre-selection current state) is exposed for ablation via the caller.
    """
    global _transition_calls
    _transition_calls += 1
    if base is None:
        base = z_sel
    z1 = ad.add(base, ad.tanh(ad.affine(z_sel, ps["trans_state_w"])))
    z2 = ad.add(z1, ad.tanh(ad.action_linear(z1, a_onehot, ps["trans_action_w"])))
    return ad.add(base, z2)


# ----------------------------------------------------------------- utility

def distance(h_next: np.ndarray, h_cur: np.ndarray, metric: str) -> np.ndarray:
    """Row-wise distance between hidden batches [B, h]."""
    if metric == "l1":
        return np.abs(h_next - h_cur).sum(axis=-1)
    if metric == "l2":
        return np.sqrt(((h_next - h_cur) ** 2).sum(axis=-1))
    if metric == "cosine":
        num = (h_next * h_cur).sum(axis=-1)
        den = np.linalg.norm(h_next, axis=-1) * np.linalg.norm(h_cur, axis=-1) + 1e-8
        return 1.0 - num / den
    if metric == "kl":
        # hidden vectors are not distributions; normalize both first
        p = _softmax_np(h_next)
        q = _softmax_np(h_cur)
        return (p * (np.log(p + 1e-12) - np.log(q + 1e-12))).sum(axis=-1)
    raise ValueError(f"unknown metric: {metric}")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def utility_terms(ps: ParamSet, z_next: np.ndarray, z_cur: np.ndarray, metric: str):
    """Per-row planning utility split into (value term, distance term).

    Computed outside the graph: the utility serves as the inner agent's
    reward and must carry no gradient.
    """
    w_embed = ps["out_embed_w"].data
    h_next = z_next @ w_embed
    h_cur = z_cur @ w_embed
    v = (h_next @ ps["out_value_w"].data)[:, 0]
    d = distance(h_next, h_cur, metric)
    return v, d


def utility(ps: ParamSet, z_next: np.ndarray, z_cur: np.ndarray, metric: str) -> np.ndarray:
    v, d = utility_terms(ps, z_next, z_cur, metric)
    return v + d
