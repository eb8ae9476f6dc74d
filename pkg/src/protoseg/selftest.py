"""Fast self-contained gates used by the `selftest` CLI subcommand.

Each check recomputes its expected answer with an independent brute-force
or closed-form routine.
"""

from itertools import combinations, permutations

import numpy as np

from . import tensor as T
from .attention import PemcaAttention, select_prototypes
from .bench import count_flops
from .losses import hungarian_match
from .metrics import panoptic_quality
from .pyramid import DeformableConv
from .tensor import Tensor


def _check_selection(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.integers(2, 5))
        hw, n = int(rng.integers(8, 64)), int(rng.integers(1, 6))
        k = rng.standard_normal((hw, heads * dh))
        q = rng.standard_normal((n, heads * dh))
        fg = rng.random((hw, n)) < 0.4
        for qi in range(n):
            if not fg[:, qi].any():
                fg[rng.integers(0, hw), qi] = True
        mask = np.where(fg, 0.0, -np.inf)
        g, _ = select_prototypes(Tensor(k), Tensor(q), mask, heads)
        for h in range(heads):
            for qi in range(n):
                best, best_s = None, None
                for p in range(hw):
                    if not fg[p, qi]:
                        continue
                    s = float(k[p, h * dh:(h + 1) * dh] @ q[qi, h * dh:(h + 1) * dh])
                    if best_s is None or s > best_s:
                        best, best_s = p, s
                if g[h, qi] != best:
                    return False, f"head {h} query {qi}: {g[h, qi]} != {best}"
    return True, "50 instances"


def _check_defconv_reduction(seed):
    rng = np.random.default_rng(seed)
    for _ in range(5):
        c = int(rng.integers(1, 4))
        x = Tensor(rng.standard_normal((c, 6, 6)))
        layer = DeformableConv(rng, c, 2)
        got = layer(x).data
        want = T.conv2d(x, layer.weight.w, layer.weight.b, stride=1, pad=1).data
        if np.max(np.abs(got - want)) > 1e-10:
            return False, f"max diff {np.max(np.abs(got - want)):.2e}"
    return True, "zero offsets equal standard conv"


def _check_identity(seed):
    rng = np.random.default_rng(seed)
    layer = PemcaAttention(rng, 16, 16, 4, zero_init_out=True)
    q_in = Tensor(rng.standard_normal((5, 16)))
    feat = Tensor(rng.standard_normal((32, 16)))
    out, _ = layer(q_in, q_in, feat, None)
    if not np.array_equal(out.data, q_in.data):
        return False, "zero output projection is not the identity"
    return True, "zero output projection is the identity"


def _check_hungarian(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        cost = rng.standard_normal((n, m))
        got = sum(cost[q, s] for q, s in hungarian_match(cost).pairs)
        best = None
        small, large = min(n, m), max(n, m)
        for subset in combinations(range(large), small):
            for perm in permutations(subset):
                total = (sum(cost[i, perm[i]] for i in range(small)) if n <= m
                         else sum(cost[perm[i], i] for i in range(small)))
                best = total if best is None else min(best, total)
        if abs(got - best) > 1e-12:
            return False, f"{got} != optimal {best}"
    return True, "20 matrices optimal"


def _check_flops(seed):
    for hw in (256, 2048, 131072):
        pem = count_flops("pemca", hw, 100, 256, 256, 8)
        mca = count_flops("masked_ca", hw, 100, 256, 256, 8)
        for fl in (pem, mca):
            if sum(t["flops"] for t in fl["terms"].values()) != fl["total"]:
                return False, "itemized terms do not sum to total"
        if hw > 100 and pem["hw_dependent_total"] >= mca["hw_dependent_total"]:
            return False, f"no HW-term saving at HW={hw}"
    return True, "terms sum; HW-dependent cost strictly lower"


def _check_pq_identity(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        segs = []
        for cls in range(3):
            mask = rng.random((12, 12)) < 0.3
            if mask.any():
                segs.append({"class": cls, "mask": mask})
        pred = []
        for s in segs:
            noisy = s["mask"] ^ (rng.random(s["mask"].shape) < 0.05)
            if noisy.any():
                pred.append({"class": s["class"], "mask": noisy})
        res = panoptic_quality(pred, segs)
        if abs(res["PQ"] - res["SQ"] * res["RQ"]) > 1e-12:
            return False, f"PQ {res['PQ']} != SQ*RQ {res['SQ'] * res['RQ']}"
    return True, "PQ equals SQ*RQ"


def run_selftest(seed=0):
    checks = [
        ("prototype selection vs brute force", _check_selection),
        ("deformable conv reduces to conv", _check_defconv_reduction),
        ("attention identity at zero init", _check_identity),
        ("hungarian matching optimality", _check_hungarian),
        ("flops model structure", _check_flops),
        ("panoptic quality identity", _check_pq_identity),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, info = fn(seed)
        except Exception as exc:  # surface, don't crash the gate runner
            ok, info = False, f"exception: {exc!r}"
        results.append((name, ok, info))
    return results
