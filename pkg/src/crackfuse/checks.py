"""The package-wide gradient-check suite.

Each entry wraps one differentiable operation (including the composites) as
a pure function of plain arrays so the finite-difference checker can
perturb every input. The CLI `gradcheck` command and the acceptance tests
both run this list.
"""
from __future__ import annotations

import numpy as np

from . import ops, scan2d, segnet, ssm, train
from .gradcheck import grad_check
from .trees import tree_flatten, tree_unflatten


def _ssm_arrays(p):
    return [p.a_log, p.skip, p.dt_w, p.dt_b, p.b_w, p.c_w]


def _ssm_from(arrs, state_dim, channels):
    return ssm.SsmParams(a_log=arrs[0], skip=arrs[1], dt_w=arrs[2], dt_b=arrs[3],
                         b_w=arrs[4], c_w=arrs[5], state_dim=state_dim, channels=channels)


def _scan_check(name, scan_fn, L=16, C=3, N=4, tol=1e-4, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((L, C)) * 0.5
    p = ssm.init_ssm_params(C, N, rng)

    def fn(xx, *arrs):
        pp = _ssm_from(list(arrs), N, C)
        y, vjp = scan_fn(xx, pp)

        def vjp_list(dy):
            dx, dp = vjp(dy)
            return (dx, *_ssm_arrays(dp))

        return y, vjp_list

    return lambda tol_=tol: grad_check(fn, [x, *_ssm_arrays(p)], tol=tol_, name=name,
                                       input_names=["x", "a_log", "skip", "dt_w", "dt_b", "b_w", "c_w"])


def _tree_fn(fn_of_tree, template):
    """Adapt fn(tree) -> (y, vjp->(dx, gradtree)) to positional arrays."""
    names = list(tree_flatten(template).keys())

    def wrapped(x, *arrays):
        tree = tree_unflatten(template, dict(zip(names, arrays)))
        y, vjp = fn_of_tree(x, tree)

        def vjp_list(dy):
            dx, gtree = vjp(dy)
            gflat = tree_flatten(gtree)
            return (dx, *(gflat[n] for n in names))

        return y, vjp_list

    return wrapped, names


def suite():
    """Return [(name, runner)] where runner(tol) -> GradCheckReport."""
    rng = np.random.default_rng(7)
    entries = []

    def add(name, fn, inputs, input_names=None, max_entries=None):
        entries.append((name, lambda tol: grad_check(
            fn, inputs, tol=tol, name=name, input_names=input_names,
            max_entries_per_input=max_entries)))

    x = rng.standard_normal((4, 6))
    add("silu", ops.silu, [x])
    add("relu", ops.relu, [x + 0.05 * np.sign(x)])  # keep away from the kink
    add("softplus", ops.softplus, [x])
    add("sigmoid", ops.sigmoid, [x])
    add("clamp01", ops.clamp01, [rng.uniform(0.1, 0.9, size=(3, 5))])
    add("layer_norm", lambda a, g, b: ops.layer_norm(a, g, b),
        [rng.standard_normal((3, 7)), rng.standard_normal(7), rng.standard_normal(7)],
        input_names=["x", "gamma", "beta"])
    add("linear", ops.linear,
        [rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)],
        input_names=["x", "w", "b"])
    add("depthwise_conv2d", ops.depthwise_conv2d,
        [rng.standard_normal((3, 5, 4)), rng.standard_normal((3, 3, 3))],
        input_names=["x", "k"])
    add("conv2d", ops.conv2d,
        [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
        input_names=["x", "w", "b"])
    add("resize_bicubic", lambda a: ops.resize_bicubic(a, 9, 7), [rng.standard_normal((2, 5, 4))])
    add("resize_bilinear", lambda a: ops.resize_bilinear(a, 3, 9), [rng.standard_normal((2, 5, 4))])
    add("adaptive_avg_pool2d", lambda a: ops.adaptive_avg_pool2d(a, 3, 3),
        [rng.standard_normal((2, 5, 7))])

    entries.append(("selective_scan_seq", _scan_check("selective_scan_seq", ssm.selective_scan_seq)))
    entries.append(("selective_scan_par", _scan_check("selective_scan_par", ssm.selective_scan_par)))

    # ss2d on a 3x3 grid, two channels, independent directions
    rng2 = np.random.default_rng(11)
    grid = rng2.standard_normal((3, 3, 2)) * 0.5
    params = [ssm.init_ssm_params(2, 2, rng2) for _ in range(4)]
    names = []
    arrays = []
    for d, p in zip(scan2d.DIRECTIONS, params):
        for fname, arr in zip(["a_log", "skip", "dt_w", "dt_b", "b_w", "c_w"], _ssm_arrays(p)):
            names.append(f"{d}.{fname}")
            arrays.append(arr)

    def ss2d_fn(xx, *arrs):
        ps = [_ssm_from(list(arrs[i * 6:(i + 1) * 6]), 2, 2) for i in range(4)]
        y, vjp = scan2d.ss2d(xx, ps)

        def vjp_list(dy):
            dx, dps = vjp(dy)
            out = [dx]
            for dp in dps:
                out.extend(_ssm_arrays(dp))
            return tuple(out)

        return y, vjp_list

    add("ss2d", ss2d_fn, [grid, *arrays], input_names=["x"] + names)

    # full residual block on a 3x3 grid, C=4
    rng3 = np.random.default_rng(13)
    bx = rng3.standard_normal((3, 3, 4)) * 0.5
    block = segnet.init_block(4, 2, rng3)
    block_fn, _bn = _tree_fn(lambda a, t: segnet.vss_block(a, t), block)
    add("vss_block", block_fn, [bx, *tree_flatten(block).values()],
        input_names=["x"] + list(tree_flatten(block).keys()))

    # patch embed and downsample
    rng4 = np.random.default_rng(17)
    cfg = segnet.ModelConfig(in_channels=2, patch_size=3, embed_dims=(4, 8), depths=(1, 1),
                             state_dim=2, num_classes=2, decoder_dim=4)
    img = rng4.standard_normal((2, 6, 6))
    emb = segnet.PatchEmbedWeights(w=rng4.standard_normal((2 * 9, 4)) * 0.2, b=np.zeros(4))
    add("patch_embed",
        lambda a, w, b: _pair_to_list(segnet.patch_embed(a, segnet.PatchEmbedWeights(w=w, b=b), cfg)),
        [img, emb.w, emb.b], input_names=["image", "w", "b"])
    dw = segnet.DownsampleWeights(w=rng4.standard_normal((16, 8)) * 0.2, b=np.zeros(8))
    add("downsample",
        lambda a, w, b: _pair_to_list(segnet.downsample(a, segnet.DownsampleWeights(w=w, b=b))),
        [rng4.standard_normal((4, 4, 4)), dw.w, dw.b], input_names=["x", "w", "b"])

    # decoder on a reduced two-level config
    rng5 = np.random.default_rng(19)
    feats = [rng5.standard_normal((4, 4, 4)) * 0.5, rng5.standard_normal((2, 2, 8)) * 0.5]
    dec = segnet.init_decoder((4, 8), 4, 2, rng5)
    dec_names = list(tree_flatten(dec).keys())

    def dec_fn(f0, f1, *arrs):
        tree = tree_unflatten(dec, dict(zip(dec_names, arrs)))
        y, vjp = segnet.uper_decode([f0, f1], tree, 12, 12)

        def vjp_list(dy):
            dfeats, dg = vjp(dy)
            gflat = tree_flatten(dg)
            return (dfeats[0], dfeats[1], *(gflat[n] for n in dec_names))

        return y, vjp_list

    add("uper_decode", dec_fn, [feats[0], feats[1], *tree_flatten(dec).values()],
        input_names=["f0", "f1"] + dec_names, max_entries=40)

    # pixel cross-entropy wrt logits
    rng6 = np.random.default_rng(23)
    logits = rng6.standard_normal((1, 2, 4, 4))
    target = rng6.integers(0, 2, size=(1, 4, 4))
    add("cross_entropy", lambda lg: train.cross_entropy(lg, target), [logits],
        input_names=["logits"])

    return entries


def _pair_to_list(pair):
    y, vjp = pair

    def vjp_list(dy):
        dx, gtree = vjp(dy)
        return (dx, *tree_flatten(gtree).values())

    return y, vjp_list


def run_suite(tol=1e-4):
    """Run every check; returns the list of reports."""
    return [runner(tol) for _name, runner in suite()]
