"""Finite-difference verification of every differentiable operation.

Each check builds a randomized small instance, reduces the op's output to a
scalar through a fixed random projection, and compares the tape gradient with
central differences at the configured tolerance.  The reversal layer is
checked against its defining property (forward identity, backward scaled by
-lambda) since an oracle that only sees forward values cannot observe it; for
the same reason the end-to-end loss check runs with the reversal disabled.

``corrupt_op`` perturbs the tape gradient of the named op before comparison —
a hook for verifying that failures are detected and attributed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import (
    ModelDims,
    Scores,
    channel_scale,
    classification_loss,
    consensus_map,
    consensus_pool,
    cross_gate,
    discriminator_forward,
    init_params,
    late_fuse,
    model_forward,
    pearson_map,
    self_gate,
    smr_forward,
)


@dataclass
class OpCheck:
    name: str
    max_err: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max rel err {self.max_err:.3e}{detail}"


@dataclass
class GradCheckReport:
    checks: list[OpCheck]
    elapsed_seconds: float

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [c.line() for c in self.checks]
        verdict = "ALL CHECKS PASSED" if self.all_passed else "CHECK FAILURES PRESENT"
        out.append(f"{verdict} ({len(self.checks)} ops, {self.elapsed_seconds:.1f}s)")
        return out


def _away_from_zero(arr: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Nudge values off the ReLU kink so finite differences stay one-sided."""
    return arr + margin * np.sign(arr) + margin * (arr == 0)


class _Checker:
    def __init__(self, seed: int, eps: float, rel: float, floor: float,
                 corrupt_op: str | None):
        self.rng = np.random.RandomState(seed)
        self.eps = eps
        self.rel = rel
        self.floor = floor
        self.corrupt_op = corrupt_op
        self.checks: list[OpCheck] = []

    def randn(self, *shape):
        return self.rng.randn(*shape)

    def compare(self, name: str, forward, wrt: list[Tensor], detail: str = "") -> None:
        """``forward()`` must rebuild the graph from ``wrt`` leaves to a scalar."""
        for t in wrt:
            t.requires_grad = True
            t.clear_grad()
        with Tape() as tape:
            out = forward()
        tape.backward(out)
        worst = 0.0
        ok = True
        for t in wrt:
            got = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.corrupt_op == name:
                got = got + 1e-2
            want = ad.finite_diff_wrt(forward, t, eps=self.eps)
            worst = max(worst, ad.max_grad_err(got, want, floor=self.floor))
            ok = ok and ad.grad_close(got, want, rel=self.rel, floor=self.floor)
        self.checks.append(OpCheck(name=name, max_err=worst, passed=ok, detail=detail))

    def check_value(self, name: str, passed: bool, max_err: float, detail: str = "") -> None:
        if self.corrupt_op == name:
            passed = False
            detail = (detail + "; " if detail else "") + "corrupted by test hook"
        self.checks.append(OpCheck(name=name, max_err=max_err, passed=passed, detail=detail))


def run_gradcheck(seed: int = 0, eps: float = 1e-5, rel: float = 1e-4,
                  floor: float = 1e-7, corrupt_op: str | None = None) -> GradCheckReport:
    start = time.monotonic()
    ck = _Checker(seed, eps, rel, floor, corrupt_op)

    # numeric core ops -----------------------------------------------------
    x = Tensor(ck.randn(5))
    w = Tensor(ck.randn(4, 5))
    b = Tensor(ck.randn(4))
    proj4 = Tensor(ck.randn(4))
    ck.compare("affine", lambda: ad.tsum(ad.affine(x, w, b) * proj4), [x, w, b])

    xr = Tensor(_away_from_zero(ck.randn(3, 4, 4)))
    proj_map = Tensor(ck.randn(3, 4, 4))
    ck.compare("relu", lambda: ad.tsum(ad.relu(xr) * proj_map), [xr],
               detail="inputs nudged off the kink")

    xs = Tensor(ck.randn(3, 4, 4))
    ck.compare("sigmoid", lambda: ad.tsum(ad.sigmoid(xs) * proj_map), [xs])

    fg = Tensor(ck.randn(3, 5, 4))
    proj3 = Tensor(ck.randn(3))
    ck.compare("global_avg_pool", lambda: ad.tsum(ad.global_avg_pool(fg) * proj3), [fg])

    fc = Tensor(ck.randn(3, 4, 4))
    wc = Tensor(ck.randn(2, 3))
    bc = Tensor(ck.randn(2))
    proj_c = Tensor(ck.randn(2, 4, 4))
    ck.compare("conv1x1", lambda: ad.tsum(ad.conv1x1(fc, wc, bc) * proj_c), [fc, wc, bc])

    fd_ = Tensor(ck.randn(2, 5, 7))
    proj_d = Tensor(ck.randn(2, 3, 4))
    ck.compare("downsample2x", lambda: ad.tsum(ad.downsample2x(fd_) * proj_d), [fd_],
               detail="odd 5x7 grid")

    mu = Tensor(ck.randn(2, 3))
    proj_u = Tensor(ck.randn(5, 7))
    ck.compare("upsample_to", lambda: ad.tsum(ad.upsample_to(mu, 5, 7) * proj_u), [mu])

    ca = Tensor(ck.randn(2, 3, 3))
    cb = Tensor(ck.randn(4, 3, 3))
    proj_cc = Tensor(ck.randn(6, 3, 3))
    ck.compare("concat_channels",
               lambda: ad.tsum(ad.concat_channels(ca, cb) * proj_cc), [ca, cb])

    logits = Tensor(ck.randn(6))
    ck.compare("softmax_xent", lambda: ad.softmax_xent(logits, 2), [logits])

    # Reversal cannot be observed by a forward-value oracle; check its
    # defining property directly for several strengths.
    gr_ok = True
    gr_err = 0.0
    for lam in (0.0, 1.0, 3.0):
        xg = Tensor(ck.randn(4), requires_grad=True)
        with Tape() as tape:
            out = ad.tsum(ad.grad_reverse(xg, lam) * proj4)
        tape.backward(out)
        want = -lam * proj4.data
        got = xg.grad if xg.grad is not None else np.zeros(4)
        gr_err = max(gr_err, ad.max_grad_err(got, want, floor=floor))
        gr_ok = gr_ok and np.allclose(got, want, rtol=0, atol=0)
        forward_identity = np.array_equal(ad.grad_reverse(xg, lam).data, xg.data)
        gr_ok = gr_ok and forward_identity
    ck.check_value("grad_reverse", gr_ok, gr_err,
                   detail="backward == -lambda * upstream at lambda in {0,1,3}")

    # model ops --------------------------------------------------------------
    dims = ModelDims(rgb_channels=4, flow_channels=4, audio_channels=4,
                     height=4, width=4, verb_classes=3, noun_classes=4)
    params = init_params(dims, bottleneck_ratio=2, pyramid_levels=1, seed=seed + 1)
    smr = params.smr["rgb"]
    smr_tensors = [smr.w1_self, smr.b1_self, smr.w2_self, smr.b2_self]
    cross_tensors = [smr.w1_cross, smr.b1_cross, smr.w2_cross, smr.b2_cross]

    pooled = Tensor(ck.randn(4))
    ck.compare("self_gate", lambda: ad.tsum(self_gate(pooled, smr) * proj4),
               [pooled] + smr_tensors)

    pooled_others = Tensor(ck.randn(8))
    ck.compare("cross_gate", lambda: ad.tsum(cross_gate(pooled_others, smr) * proj4),
               [pooled_others] + cross_tensors)

    feat = Tensor(ck.randn(4, 4, 4))
    gate = Tensor(ck.rng.rand(4))
    proj_f = Tensor(ck.randn(4, 4, 4))
    ck.compare("channel_scale", lambda: ad.tsum(channel_scale(feat, gate) * proj_f),
               [feat, gate])

    others = [Tensor(ck.randn(4)), Tensor(ck.randn(4))]
    proj_smr = Tensor(ck.randn(8, 4, 4))
    ck.compare("smr_forward",
               lambda: ad.tsum(smr_forward(feat, others, smr) * proj_smr),
               [feat, others[0], others[1]] + smr_tensors + cross_tensors)

    hr = Tensor(ck.randn(4, 3, 3))
    hf = Tensor(ck.randn(4, 3, 3))
    proj_p = Tensor(ck.randn(3, 3))
    for mode in ("centered", "as-written"):
        ck.compare(f"pearson_map[{mode}]",
                   lambda m=mode: ad.tsum(pearson_map(hr, hf, m) * proj_p), [hr, hf])

    hr2 = Tensor(ck.randn(4, 4, 5))
    hf2 = Tensor(ck.randn(4, 4, 5))
    proj_cm = Tensor(ck.randn(4, 5))
    ck.compare("consensus_map",
               lambda: ad.tsum(consensus_map(hr2, hf2, 2) * proj_cm), [hr2, hf2],
               detail="k=2 pyramid")

    fcp = Tensor(ck.randn(6, 3, 3))
    cmap = Tensor(ck.rng.uniform(-1, 1, (3, 3)))
    proj6 = Tensor(ck.randn(6))
    ck.compare("consensus_pool",
               lambda: ad.tsum(consensus_pool(fcp, cmap) * proj6), [fcp, cmap])

    s1v, s1n = Tensor(ck.randn(3)), Tensor(ck.randn(4))
    s2v, s2n = Tensor(ck.randn(3)), Tensor(ck.randn(4))
    proj_v, proj_n = Tensor(ck.randn(3)), Tensor(ck.randn(4))
    ck.compare("late_fuse",
               lambda: ad.tsum(late_fuse(Scores(s1v, s1n), Scores(s2v, s2n)).verb * proj_v)
               + ad.tsum(late_fuse(Scores(s1v, s1n), Scores(s2v, s2n)).noun * proj_n),
               [s1v, s1n, s2v, s2n])

    dfeat = Tensor(ck.randn(24))
    disc_tensors = [params.heads.disc_hidden_w, params.heads.disc_hidden_b,
                    params.heads.disc_out_w, params.heads.disc_out_b]
    ck.compare("discriminator_forward",
               lambda: ad.softmax_xent(
                   discriminator_forward(dfeat, params.heads, 0.0, adversarial=False), 0),
               [dfeat] + disc_tensors,
               detail="reversal disabled for the oracle")

    ly = Tensor(np.array(1.7))
    ld = Tensor(np.array(0.4))
    ck.compare("combined_loss", lambda: ly * 1.0 + ld * 3.0, [ly, ld],
               detail="lambda_y=1, lambda_d=3")

    # end-to-end loss over every parameter and every input feature ----------
    feats = {"rgb": Tensor(ck.randn(4, 4, 4)), "flow": Tensor(ck.randn(4, 4, 4)),
             "audio": Tensor(ck.randn(4))}

    def end_to_end():
        res = model_forward(feats, params, adversarial=False)
        loss_y = classification_loss(res.scores.fused, 1, 2)
        loss_d = ad.softmax_xent(res.domain_logits, 0)
        return loss_y * 1.0 + loss_d * 3.0

    all_wrt = list(params.named().values()) + list(feats.values())
    ck.compare("end_to_end_loss", end_to_end, all_wrt,
               detail="all params + inputs, reversal disabled")

    return GradCheckReport(checks=ck.checks, elapsed_seconds=time.monotonic() - start)
