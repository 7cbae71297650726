"""Projection head with an identity path, a frozen base path and a
late-spawned incremental path.

Session 0 trains the identity branch and the base selective SSM branch on
the pooled sum of their outputs.  Before the first incremental session the
head spawns a second selective SSM branch whose gate projection starts at
exactly zero, so the head's outputs are bit-identical across the spawn;
the identity and base branches freeze at that point and never move again.
"""

from __future__ import annotations

import copy
import hashlib

import numpy as np

from .branch import BranchParams, branch_forward, init_branch_params
from .tensor import Tensor

_BASE_BRANCHES = frozenset({"p_iden", "g_base"})


class DualProjector:
    """Three-branch projection head with per-branch freeze flags."""

    def __init__(self, d_in: int, d_model: int, d_state: int, height: int,
                 width: int, k_dirs: int, seed: int, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.d_in = d_in
        self.d_model = d_model
        self.dtype = dtype
        bound = 1.0 / np.sqrt(d_in)
        self.p_iden_w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_model)).astype(dtype),
                               requires_grad=True)
        self.p_iden_b = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
        self.g_base = init_branch_params(d_in, d_model, d_state, height, width,
                                         k_dirs, rng, dtype=dtype)
        self.g_inc: BranchParams | None = None
        self._frozen: set[str] = set()

    # -- branch forwards -------------------------------------------------------

    def identity_branch(self, f_map: Tensor) -> Tensor:
        """Spatially pooled affine residual path: [N, D, H, W] -> [N, D']."""
        pooled = f_map.mean(axis=(2, 3))
        return pooled @ self.p_iden_w + self.p_iden_b

    def forward_base_phase(self, f_map: Tensor) -> Tensor:
        """Identity plus base branch.  Defined in every phase; training code
        restricts its use to the base session."""
        mu_base, _ = branch_forward(self.g_base, f_map)
        return self.identity_branch(f_map) + mu_base

    def forward_incremental_phase(self, f_map: Tensor):
        """Sum of all three branches plus the incremental branch's aux."""
        if self.g_inc is None:
            raise RuntimeError("incremental branch absent; spawn it first")
        mu_inc, aux = branch_forward(self.g_inc, f_map)
        return self.forward_base_phase(f_map) + mu_inc, aux

    # -- phase transitions -------------------------------------------------------

    def freeze_base(self):
        """Exclude the identity and base branches from all later training."""
        self._frozen |= _BASE_BRANCHES
        self.p_iden_w.requires_grad = False
        self.p_iden_b.requires_grad = False
        self.g_base.set_requires_grad(False)

    def spawn_incremental(self, seed: int, init: str = "fresh") -> None:
        """Create the zero-gated incremental branch and freeze the rest.

        init="fresh" draws new parameters from `seed`; init="copy" clones the
        base branch.  Either way the gate projection is zeroed, so forward
        outputs are unchanged bitwise at spawn time.
        """
        if self.g_inc is not None:
            raise RuntimeError("incremental branch already spawned")
        if init == "fresh":
            g = init_branch_params(self.d_in, self.d_model, self.g_base.d_state,
                                   self.g_base.height, self.g_base.width,
                                   self.g_base.k_dirs, np.random.default_rng(seed),
                                   dtype=self.dtype, zero_gate=True)
        elif init == "copy":
            g = copy.deepcopy(self.g_base)
            g.z_proj_w = Tensor(np.zeros_like(g.z_proj_w.data), requires_grad=True)
            g.z_proj_b = Tensor(np.zeros_like(g.z_proj_b.data), requires_grad=True)
            g.set_requires_grad(True)
        else:
            raise ValueError(f"unknown incremental init '{init}'")
        self.g_inc = g
        self.freeze_base()

    @property
    def frozen(self) -> frozenset:
        return frozenset(self._frozen)

    @property
    def phase(self) -> str:
        return "base" if self.g_inc is None else "incremental"

    # -- parameter access ----------------------------------------------------------

    def named_params(self, trainable_only: bool = False):
        groups = [
            ("p_iden", [("w", self.p_iden_w), ("b", self.p_iden_b)]),
            ("g_base", list(self.g_base.named_params())),
        ]
        if self.g_inc is not None:
            groups.append(("g_inc", list(self.g_inc.named_params())))
        for branch, items in groups:
            if trainable_only and branch in self._frozen:
                continue
            for name, t in items:
                yield f"{branch}.{name}", t

    def trainable_params(self):
        return [t for _, t in self.named_params(trainable_only=True)]


def frozen_checksum(named_tensors) -> str:
    """Order-stable digest of (name, tensor) pairs, for freeze verification."""
    h = hashlib.sha256()
    for name, t in sorted(named_tensors, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(str(t.data.dtype).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
