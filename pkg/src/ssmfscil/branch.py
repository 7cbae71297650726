"""Selective SSM branch: the projection block shared by base and incremental paths.

Pipeline for a feature map F of shape [N, D, H, W]:

  1. tokenize: row-major flatten to [N, L, D] (L = H*W), affine map to the
     model width, add learnable positional embeddings
  2. split into a scan stream X and a gate stream Z
  3. refine X with a depthwise conv over the token axis plus SiLU
  4. scan the refined tokens along K directional orderings of the grid,
     with input-conditioned (b, c, delta) generated per direction
  5. scatter each direction's outputs back to grid order, sum over
     directions, gate elementwise with SiLU(Z), average-pool over tokens

The gate stream is the handle for the norm-suppression loss and the
generated scan parameters feed the separation loss, so branch_forward
returns them alongside the pooled output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .ssm import (ScanInputs, selective_scan_fused, selective_scan_jit,
                  selective_scan_sequential)
from .tensor import Tensor, conv1d_depthwise

CONV_WIDTH = 3
_SCAN_IMPLS = {
    "jit": selective_scan_jit,
    "fused": selective_scan_fused,
    "reference": selective_scan_sequential,
}


def scan_order(height: int, width: int, k: int) -> np.ndarray:
    """Permutation of grid positions for direction k.

    k=0 row-major top-left to bottom-right, k=1 its reverse, k=2 column-major
    top-left to bottom-right, k=3 its reverse.  Positions index the row-major
    flattening of the grid.
    """
    base = np.arange(height * width)
    if k == 0:
        return base
    if k == 1:
        return base[::-1].copy()
    if k == 2:
        return base.reshape(height, width).T.reshape(-1).copy()
    if k == 3:
        return base.reshape(height, width).T.reshape(-1)[::-1].copy()
    raise ValueError(f"unknown scan direction {k}")


def inverse_order(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return inv


@dataclass
class BranchParams:
    """All learnable state of one selective SSM branch.

    Projection weights for b/c/delta and the state-decay parameter are held
    per scan direction (leading K axis).  The decay diagonal is stored as
    a_log with a_diag = -exp(a_log), which keeps it strictly negative under
    any gradient update.
    """

    d_in: int
    d_model: int
    d_state: int
    height: int
    width: int
    k_dirs: int
    pos_embed: Tensor = field(repr=False)
    token_w: Tensor = field(repr=False)
    token_b: Tensor = field(repr=False)
    x_proj_w: Tensor = field(repr=False)
    x_proj_b: Tensor = field(repr=False)
    z_proj_w: Tensor = field(repr=False)
    z_proj_b: Tensor = field(repr=False)
    conv_w: Tensor = field(repr=False)
    conv_b: Tensor = field(repr=False)
    b_proj_w: Tensor = field(repr=False)
    b_proj_b: Tensor = field(repr=False)
    c_proj_w: Tensor = field(repr=False)
    c_proj_b: Tensor = field(repr=False)
    dt_proj_w: Tensor = field(repr=False)
    dt_proj_b: Tensor = field(repr=False)
    a_log: Tensor = field(repr=False)
    scan_impl: str = "jit"  # "fused" and "reference" are the oracle-checked fallbacks

    @property
    def seq_len(self) -> int:
        return self.height * self.width

    def a_diag(self) -> Tensor:
        return -self.a_log.exp()

    def named_params(self):
        for f in fields(self):
            if f.type == "Tensor" or isinstance(getattr(self, f.name), Tensor):
                yield f.name, getattr(self, f.name)

    def params(self):
        return [t for _, t in self.named_params()]

    def set_requires_grad(self, flag: bool):
        for _, t in self.named_params():
            t.requires_grad = flag

    def orders(self) -> np.ndarray:
        return np.stack([scan_order(self.height, self.width, k) for k in range(self.k_dirs)])


def _affine_init(rng, fan_in, shape, dtype):
    # Variance-preserving uniform init (gain 1).  The scan multiplies three
    # projected signals, so sub-unit gain per layer collapses its output and
    # with it the gradient that has to wake the zero-initialized gate.
    bound = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_branch_params(d_in: int, d_model: int, d_state: int, height: int, width: int,
                       k_dirs: int, rng: np.random.Generator, dtype=np.float64,
                       zero_gate: bool = False) -> BranchParams:
    """Seeded parameter set; zero_gate zeroes the gate projection so the
    branch output is exactly zero until trained."""
    if not 1 <= k_dirs <= 4:
        raise ValueError("k_dirs must be in 1..4")
    L = height * width
    a_row = np.log(np.arange(1, d_state + 1, dtype=dtype))
    p = BranchParams(
        d_in=d_in, d_model=d_model, d_state=d_state,
        height=height, width=width, k_dirs=k_dirs,
        pos_embed=Tensor((0.02 * rng.standard_normal((L, d_model))).astype(dtype),
                         requires_grad=True),
        token_w=_affine_init(rng, d_in, (d_in, d_model), dtype),
        token_b=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        x_proj_w=_affine_init(rng, d_model, (d_model, d_model), dtype),
        x_proj_b=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        z_proj_w=(Tensor(np.zeros((d_model, d_model), dtype=dtype), requires_grad=True)
                  if zero_gate else _affine_init(rng, d_model, (d_model, d_model), dtype)),
        z_proj_b=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        conv_w=_affine_init(rng, CONV_WIDTH, (d_model, CONV_WIDTH), dtype),
        conv_b=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        b_proj_w=_affine_init(rng, d_model, (k_dirs, d_model, d_state), dtype),
        b_proj_b=Tensor(np.zeros((k_dirs, d_state), dtype=dtype), requires_grad=True),
        c_proj_w=_affine_init(rng, d_model, (k_dirs, d_model, d_state), dtype),
        c_proj_b=Tensor(np.zeros((k_dirs, d_state), dtype=dtype), requires_grad=True),
        dt_proj_w=_affine_init(rng, d_model, (k_dirs, d_model, d_model), dtype),
        dt_proj_b=Tensor(np.zeros((k_dirs, d_model), dtype=dtype), requires_grad=True),
        a_log=Tensor(np.tile(a_row, (k_dirs, 1)), requires_grad=True),
    )
    return p


@dataclass
class BranchAux:
    """Per-forward byproducts needed by the class-sensitive losses.

    z_gate holds the raw gate stream [N, L, D'] (pre-activation; the
    suppression loss constrains this norm directly).  The scan parameter
    sequences are [N, K, L, D_state] for b/c and [N, K, L, D'] for delta.
    """

    z_gate: Tensor
    b_seq: Tensor
    c_seq: Tensor
    dt_seq: Tensor


def embed_tokens(params: BranchParams, f_map: Tensor) -> Tensor:
    """[N, D, H, W] -> [N, L, D'] tokens with positional embeddings added."""
    n, d, h, w = f_map.shape
    if h != params.height or w != params.width:
        raise ValueError(
            f"spatial size {h}x{w} does not match configured {params.height}x{params.width}")
    tokens = f_map.transpose((0, 2, 3, 1)).reshape(n, h * w, d)
    return tokens @ params.token_w + params.token_b + params.pos_embed


def project_streams(params: BranchParams, f_hat: Tensor):
    """Split the token sequence into the scan stream and the gate stream."""
    x = f_hat @ params.x_proj_w + params.x_proj_b
    z = f_hat @ params.z_proj_w + params.z_proj_b
    return x, z


def refine_conv(params: BranchParams, x: Tensor) -> Tensor:
    return conv1d_depthwise(x, params.conv_w, params.conv_b).silu()


def directional_scan(x_hat: Tensor, k: int, height: int, width: int) -> Tensor:
    """Reorder tokens [N, L, D'] along direction k's grid traversal."""
    return x_hat.take(scan_order(height, width, k), axis=1)


def generate_params(params: BranchParams, x_seq: Tensor, k: int):
    """Input-conditioned (b, c, delta) for direction k.

    Each position's parameters depend only on that position's token;
    delta passes through softplus so it is strictly positive.
    """
    if not 0 <= k < params.k_dirs:
        raise ValueError(f"unknown scan direction {k}")
    b = x_seq @ params.b_proj_w[k] + params.b_proj_b[k]
    c = x_seq @ params.c_proj_w[k] + params.c_proj_b[k]
    dt = (x_seq @ params.dt_proj_w[k] + params.dt_proj_b[k]).softplus()
    return b, c, dt


def _scan_all_directions(params: BranchParams, x_hat: Tensor):
    """Gather all K directional sequences and scan them in one batched pass.

    Returns (y_grid [N, L, D'], b, c, dt) with parameter sequences stacked
    on a direction axis.  Equivalent to per-direction generate_params plus
    selective_scan_sequential plus unscatter and summation.
    """
    orders = params.orders()
    x_dirs = x_hat.take(orders, axis=1)  # [N, K, L, D']
    b = x_dirs @ params.b_proj_w + params.b_proj_b.unsqueeze(1)
    c = x_dirs @ params.c_proj_w + params.c_proj_b.unsqueeze(1)
    dt = (x_dirs @ params.dt_proj_w + params.dt_proj_b.unsqueeze(1)).softplus()
    a = params.a_diag().unsqueeze(1)  # [K, 1, D_state] against h [N, K, D', D_state]
    scan = _SCAN_IMPLS[params.scan_impl]
    y_dirs = scan(ScanInputs(x_dirs, b, c, dt), a)
    parts = []
    for k in range(params.k_dirs):
        inv = inverse_order(orders[k])
        parts.append(y_dirs[:, k].take(inv, axis=1))
    y_grid = parts[0]
    for part in parts[1:]:
        y_grid = y_grid + part
    return y_grid, b, c, dt


def ss2d_forward(params: BranchParams, x_hat: Tensor) -> Tensor:
    """Directional scans scattered back to grid order and summed over K."""
    return _scan_all_directions(params, x_hat)[0]


def branch_forward(params: BranchParams, f_map: Tensor):
    """Full branch: returns (pooled output [N, D'], BranchAux)."""
    f_hat = embed_tokens(params, f_map)
    x, z = project_streams(params, f_hat)
    x_hat = refine_conv(params, x)
    y_grid, b, c, dt = _scan_all_directions(params, x_hat)
    gated = y_grid * z.silu()
    mu = gated.mean(axis=1)
    return mu, BranchAux(z_gate=z, b_seq=b, c_seq=c, dt_seq=dt)
