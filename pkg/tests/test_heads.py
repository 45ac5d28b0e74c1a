import math

import numpy as np
import pytest

from dynperc.branches import ConvParams
from dynperc.geometry import Box3D, CameraIntrinsics, box_corners
from dynperc.heads import (
    ATTENTION_RANK,
    ATTENTION_SIZE,
    MAX_DEPTH,
    MIN_DEPTH,
    NUM_BASES,
    AttentionBasis,
    DecodeError,
    DepthHeadParams,
    Embedding3D,
    LossWeights,
    NonFiniteLossError,
    PanopticWeights,
    SegEmbedding,
    aggregate_instance_embeddings,
    attention_maps,
    attention_param_counts,
    corner_loss,
    decode_3d,
    decode_3d_tensors,
    depth_head,
    factored_attention_mask,
    gt_alpha,
    panoptic_logits,
    panoptic_loss,
    thing_weights,
    total_loss,
)
from dynperc.numerics import ShapeError, Tensor, conv2d, grad_check, tsum

CAM = CameraIntrinsics(700.0, 650.0, 320.0, 180.0)


def random_basis(rng, S=ATTENTION_SIZE):
    return AttentionBasis(Tensor(rng.standard_normal((NUM_BASES, ATTENTION_RANK, S))),
                          Tensor(rng.standard_normal((NUM_BASES, ATTENTION_RANK, S))))


def up_matrix(n, factor):
    # aligned linear upsampling: output p reads input p / factor, border replicated
    m = np.zeros((n * factor, n))
    for p in range(n * factor):
        c = min(p / factor, n - 1)
        i = int(c)
        j = min(i + 1, n - 1)
        m[p, i] += 1 - (c - i)
        m[p, j] += c - i
    return m


def materialized_mask(R, t, s, U, V):
    D, H, W = R.shape
    K = U.shape[0]
    out = np.zeros((H, W))
    for k in range(K):
        sigma = np.diag(s[k * ATTENTION_RANK:(k + 1) * ATTENTION_RANK])
        Q = U[k].T @ sigma @ V[k]
        Q_up = up_matrix(Q.shape[0], H // Q.shape[0]) @ Q @ up_matrix(Q.shape[1], W // Q.shape[1]).T
        proj = np.einsum("d,dhw->hw", t.reshape(D, K)[:, k], R)
        out += proj * Q_up
    return out


# -- factored attention ----------------------------------------------------------

def test_zero_factors_give_zero_mask():
    rng = np.random.default_rng(0)
    R = Tensor(rng.standard_normal((8, 56, 56)))
    e = SegEmbedding(Tensor(rng.standard_normal(32)), Tensor(np.zeros(16)))
    np.testing.assert_array_equal(factored_attention_mask(R, e, random_basis(rng)).data, 0.0)


@pytest.mark.parametrize("k,d", [(0, 0), (2, 3), (3, 1)])
def test_one_hot_factor_selects_row_outer_product(k, d):
    rng = np.random.default_rng(1)
    basis = random_basis(rng)
    s = np.zeros(16)
    s[k * ATTENTION_RANK + d] = 1.0
    Q = attention_maps(Tensor(s), basis).data
    np.testing.assert_allclose(Q[k], np.outer(basis.U.data[k, d], basis.V.data[k, d]), atol=1e-15)
    others = [j for j in range(NUM_BASES) if j != k]
    np.testing.assert_array_equal(Q[others], 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_factored_mask_matches_materialized_attention(seed):
    rng = np.random.default_rng(seed)
    D = 8
    R = rng.standard_normal((D, 56, 56))
    t, s = rng.standard_normal(D * NUM_BASES), rng.standard_normal(16)
    basis = random_basis(rng)
    got = factored_attention_mask(Tensor(R), SegEmbedding(Tensor(t), Tensor(s)), basis).data
    ref = materialized_mask(R, t, s, basis.U.data, basis.V.data)
    assert got.shape == (56, 56)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_attention_parameter_counts():
    assert attention_param_counts() == (16, 784)


def test_seg_embedding_split_and_shape_errors():
    e = SegEmbedding.split(Tensor(np.arange(48.0)), dense_channels=8)
    np.testing.assert_array_equal(e.t.data, np.arange(32.0))
    np.testing.assert_array_equal(e.s.data, np.arange(32.0, 48.0))
    with pytest.raises(ShapeError):
        SegEmbedding.split(Tensor(np.zeros(47)), dense_channels=8)
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeError):
        factored_attention_mask(Tensor(np.zeros((8, 56, 56))), SegEmbedding(Tensor(np.zeros(30)), Tensor(np.zeros(16))),
                                random_basis(rng))
    with pytest.raises(ShapeError):
        factored_attention_mask(Tensor(np.zeros((8, 50, 50))), SegEmbedding(Tensor(np.zeros(32)), Tensor(np.zeros(16))),
                                random_basis(rng))
    with pytest.raises(ShapeError):
        AttentionBasis(Tensor(np.zeros((4, 4, 14))), Tensor(np.zeros((4, 4, 13))))


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    R, t, s = (Tensor(rng.standard_normal(shape)) for shape in ((4, 28, 28), (16,), (16,)))
    basis = random_basis(rng, S=14)
    probe = rng.standard_normal((28, 28))

    def f(R, t, s, U, V):
        return tsum(factored_attention_mask(R, SegEmbedding(t, s), AttentionBasis(U, V)) * probe)

    report = grad_check(f, [R, t, s, basis.U, basis.V], max_coords=12, rng=np.random.default_rng(seed))
    assert report.passed, report


# -- panoptic layer --------------------------------------------------------------------

def test_mean_embedding_cases():
    rng = np.random.default_rng(3)
    e = Tensor(rng.standard_normal(6))
    np.testing.assert_array_equal(aggregate_instance_embeddings([e]).data, e.data)
    np.testing.assert_array_equal(aggregate_instance_embeddings([e, Tensor(-e.data)]).data, 0.0)
    vecs = [rng.standard_normal(6) for _ in range(5)]
    mean = aggregate_instance_embeddings([Tensor(v) for v in vecs]).data
    for i in range(6):
        assert abs(mean[i] - sum(v[i] for v in vecs) / 5) < 1e-15
    assert aggregate_instance_embeddings([]) is None


def test_instances_without_proposals_are_dropped():
    a, b = Tensor(np.ones(3)), Tensor(np.full(3, 3.0))
    W, kept = thing_weights([[a, b], [], [b]])
    assert kept == [0, 2]
    np.testing.assert_array_equal(W.data, [[2.0, 3.0]] * 3)
    assert thing_weights([[], []]) == (None, [])


def test_zero_weights_give_log_class_count_loss():
    F = Tensor(np.random.default_rng(4).standard_normal((6, 3, 4)))
    weights = PanopticWeights(Tensor(np.zeros((6, 2))), Tensor(np.zeros((6, 3))))
    logits = panoptic_logits(F, weights)
    assert logits.shape == (5, 3, 4)
    target = np.random.default_rng(5).integers(0, 5, size=(3, 4))
    assert panoptic_loss(logits, target).item() == pytest.approx(math.log(5), abs=1e-14)


def test_one_hot_stuff_column_reads_channel():
    F = np.zeros((4, 2, 2))
    F[2, 1, 0] = 3.5
    W = np.zeros((4, 1))
    W[2, 0] = 1.0
    logits = panoptic_logits(Tensor(F), PanopticWeights(Tensor(W), None)).data
    np.testing.assert_array_equal(logits[0], F[2])


def test_panoptic_logits_match_matmul():
    rng = np.random.default_rng(6)
    F = rng.standard_normal((5, 3, 4))
    Ws, Wt = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    logits = panoptic_logits(Tensor(F), PanopticWeights(Tensor(Ws), Tensor(Wt))).data
    Wp = np.concatenate([Ws, Wt], axis=1)
    for c in range(5):
        for h in range(3):
            for w in range(4):
                assert abs(logits[c, h, w] - sum(Wp[d, c] * F[d, h, w] for d in range(5))) < 1e-12
    with pytest.raises(ShapeError):
        panoptic_logits(Tensor(F[:4]), PanopticWeights(Tensor(Ws), Tensor(Wt)))


def test_thing_columns_are_permutation_equivariant():
    rng = np.random.default_rng(7)
    F = Tensor(rng.standard_normal((4, 3, 3)))
    Ws = Tensor(rng.standard_normal((4, 2)))
    things = [Tensor(rng.standard_normal(4)) for _ in range(3)]
    perm = [2, 0, 1]
    a = panoptic_logits(F, PanopticWeights(Ws, thing_weights([[t] for t in things])[0])).data
    b = panoptic_logits(F, PanopticWeights(Ws, thing_weights([[things[p]] for p in perm])[0])).data
    np.testing.assert_array_equal(b[:2], a[:2])
    np.testing.assert_array_equal(b[2:], a[2:][perm])
    target = rng.integers(0, 5, size=(3, 3))
    inverse = np.argsort(perm)
    relabeled = np.where(target >= 2, inverse[np.clip(target - 2, 0, 2)] + 2, target)
    ce_a = panoptic_loss(Tensor(a), target).item()
    ce_b = panoptic_loss(Tensor(b), relabeled).item()
    assert ce_a == pytest.approx(ce_b, abs=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_panoptic_gradients(seed):
    rng = np.random.default_rng(seed)
    F, Ws, Wt = (Tensor(rng.standard_normal(s)) for s in ((4, 3, 3), (4, 2), (4, 2)))
    target = rng.integers(-1, 4, size=(3, 3))
    target[0, 0] = 1

    def f(F, Ws, Wt):
        return panoptic_loss(panoptic_logits(F, PanopticWeights(Ws, Wt)), target)

    assert grad_check(f, [F, Ws, Wt]).passed


# -- 3D decode ------------------------------------------------------------------------

def test_decode_without_crop_uses_instance_depth():
    e = Embedding3D.from_values(4.0, -2.0, 12.0, (0.0, 0.0, 0.0), 0.0, 1.0)
    R = Tensor(np.ones((3, 5, 5)))
    box = decode_3d(e, (300.0, 200.0), CAM, R, Tensor(np.zeros(3)))
    assert box.center[2] == 12.0
    assert box.dims == (1.0, 1.0, 1.0)
    # alpha 0 converts to yaw = atan2(x, z)
    assert box.yaw == pytest.approx(math.atan2(box.center[0], 12.0), abs=1e-15)


def test_zero_sine_gives_zero_alpha():
    e = Embedding3D.from_values(0.0, 0.0, 5.0, (0.1, 0.2, 0.3), 0.0, 2.5)
    assert decode_3d_tensors(e, (10.0, 10.0), CAM).alpha.item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_decode_matches_step_by_step(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(10)
    vals[2] = rng.uniform(5, 40)
    R, w_z = rng.standard_normal((6, 7, 7)), 0.5 * rng.standard_normal(6)
    loc = rng.uniform(0, 600, size=2)
    dec = decode_3d_tensors(Embedding3D(Tensor(vals)), loc, CAM, Tensor(R), Tensor(w_z))
    u, v = loc[0] + vals[0], loc[1] + vals[1]
    z = vals[2] + sum(R[d].mean() * w_z[d] for d in range(6))
    center = [(u - CAM.u0) * z / CAM.fx, (v - CAM.v0) * z / CAM.fy, z]
    norm = math.hypot(vals[6], vals[7])
    assert np.max(np.abs(dec.center.data - center)) < 1e-10
    assert np.max(np.abs(dec.dims.data - np.exp(vals[3:6]))) < 1e-10
    assert abs(dec.alpha.item() - math.atan2(vals[6] / norm, vals[7] / norm)) < 1e-10
    np.testing.assert_array_equal(dec.attr_logits.data, vals[8:])
    box = dec.to_box()
    assert box.attribute == int(np.argmax(vals[8:]))
    assert all(d > 0 for d in box.dims)


def test_nonpositive_depth_is_rejected():
    e = Embedding3D.from_values(0.0, 0.0, -1.0, (0.0, 0.0, 0.0), 0.0, 1.0)
    with pytest.raises(DecodeError):
        decode_3d(e, (0.0, 0.0), CAM)
    with pytest.raises(ShapeError):
        Embedding3D(Tensor(np.zeros(7)))


# -- corner loss ----------------------------------------------------------------------

def pred_from(center, dims, alpha, attrs=()):
    # decoded tensors built directly: decode is covered above
    from dynperc.heads import Decoded3D

    return Decoded3D(Tensor(center), Tensor(dims), Tensor(alpha), Tensor(np.asarray(attrs, float)))


def random_box(rng):
    return Box3D((rng.uniform(-8, 8), rng.uniform(-1, 2), rng.uniform(5, 50)),
                 tuple(rng.uniform(0.5, 4.5, size=3)), rng.uniform(-math.pi, math.pi), int(rng.integers(0, 3)))


def corner_template(center, dims, yaw):
    h, w, l = dims
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for sl in (1, -1):
        for sh in (1, -1):
            for sw in (1, -1):
                x, y, z = sl * l / 2, sh * h / 2, sw * w / 2
                out.append((c * x + s * z + center[0], y + center[1], -s * x + c * z + center[2]))
    return np.array(out)


def test_identical_prediction_has_no_corner_error():
    gt = random_box(np.random.default_rng(8))
    terms = corner_loss(pred_from(gt.center, gt.dims, gt_alpha(gt)), gt)
    for t in (terms.loc, terms.dim, terms.ori):
        assert abs(t.item()) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_corner_terms_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    gt = random_box(rng)
    center = np.array(gt.center) + rng.normal(0, 0.5, 3)
    dims = np.array(gt.dims) * rng.uniform(0.7, 1.3, 3)
    alpha = gt_alpha(gt) + rng.normal(0, 0.3)
    terms = corner_loss(pred_from(center, dims, alpha), gt)
    ref = corner_template(gt.center, gt.dims, gt.yaw)
    yaw = alpha + math.atan2(gt.center[0], gt.center[2])
    assert abs(terms.loc.item() - np.abs(corner_template(center, gt.dims, gt.yaw) - ref).sum()) < 1e-10
    assert abs(terms.dim.item() - np.abs(corner_template(gt.center, dims, gt.yaw) - ref).sum()) < 1e-10
    assert abs(terms.ori.item() - np.abs(corner_template(gt.center, gt.dims, yaw) - ref).sum()) < 1e-10


@pytest.mark.parametrize("group", ["loc", "dim", "ori"])
@pytest.mark.parametrize("seed", range(5))
def test_single_group_perturbation_is_disentangled(group, seed):
    rng = np.random.default_rng(seed)
    gt = random_box(rng)
    center, dims, alpha = np.array(gt.center), np.array(gt.dims), gt_alpha(gt)
    if group == "loc":
        center = center + rng.normal(0, 1, 3)
    elif group == "dim":
        dims = dims * rng.uniform(1.1, 1.5, 3)
    else:
        alpha += rng.uniform(0.2, 1.0)
    terms = corner_loss(pred_from(center, dims, alpha), gt)
    values = {"loc": terms.loc.item(), "dim": terms.dim.item(), "ori": terms.ori.item()}
    # roundoff between the array and tensor corner paths stays far below this
    assert {k for k, v in values.items() if abs(v) > 1e-9} == {group}


def test_attribute_term_is_cross_entropy():
    gt = Box3D((0.0, 1.0, 10.0), (1.5, 1.7, 4.0), 0.3, attribute=1)
    terms = corner_loss(pred_from(gt.center, gt.dims, gt_alpha(gt), attrs=(0.0, 0.0, 0.0)), gt)
    assert terms.attr.item() == pytest.approx(math.log(3), abs=1e-14)
    no_attr = corner_loss(pred_from(gt.center, gt.dims, gt_alpha(gt)), gt)
    assert no_attr.attr is None


@pytest.mark.parametrize("seed", range(20))
def test_decode_and_corner_gradients(seed):
    rng = np.random.default_rng(seed)
    gt = random_box(rng)
    vec = Tensor(np.concatenate([rng.normal(0, 3, 2), [gt.center[2] + rng.normal(0, 2)],
                                 np.log(gt.dims) + rng.normal(0, 0.2, 3), rng.standard_normal(2),
                                 rng.standard_normal(3)]))
    from dynperc.geometry import project

    location = np.array(project(CAM, gt.center))
    R, w_z = Tensor(rng.standard_normal((3, 4, 4))), Tensor(0.3 * rng.standard_normal(3))

    def f(vec, R, w_z):
        terms = corner_loss(decode_3d_tensors(Embedding3D(vec), location, CAM, R, w_z), gt)
        return terms.loc + 2.0 * terms.dim + terms.ori + terms.attr

    assert grad_check(f, [vec, R, w_z]).passed


# -- depth head -----------------------------------------------------------------------

def depth_params(rng, D, scale=0.2, zero=False, bias=0.0):
    chans = [(D, D), (D, D), (1, D)]
    convs = []
    for i, (o, c) in enumerate(chans):
        w = np.zeros((o, c, 3, 3)) if zero else scale * rng.standard_normal((o, c, 3, 3))
        b = np.full(o, bias) if zero and i == 2 else (np.zeros(o) if zero else scale * rng.standard_normal(o))
        convs.append(ConvParams(Tensor(w), Tensor(b)))
    return DepthHeadParams(convs)


@pytest.mark.parametrize("bias,expected", [(7.5, 7.5), (500.0, MAX_DEPTH), (-3.0, MIN_DEPTH)])
def test_zero_depth_head_is_clamped_bias(bias, expected):
    F = Tensor(np.random.default_rng(9).standard_normal((4, 3, 5)))
    out = depth_head(F, depth_params(None, 4, zero=True, bias=bias)).data
    assert out.shape == (1, 24, 40)
    np.testing.assert_array_equal(out, expected)


def test_depth_head_output_resolution():
    rng = np.random.default_rng(10)
    out = depth_head(Tensor(rng.standard_normal((2, 32, 64))), depth_params(rng, 2))
    assert out.shape == (1, 256, 512)


def test_depth_head_matches_transcription():
    rng = np.random.default_rng(11)
    F = rng.standard_normal((3, 4, 5))
    params = depth_params(rng, 3, scale=1.0)
    x = F
    for i, conv in enumerate(params.convs):
        x = conv2d(Tensor(x), conv.weight, conv.bias, pad=1).data
        if i < 2:
            x = x / (1 + np.exp(-x))
        _, h, w = x.shape
        x = np.einsum("ph,chw,qw->cpq", up_matrix(h, 2), x, up_matrix(w, 2))
    ref = np.clip(x, MIN_DEPTH, MAX_DEPTH)
    assert np.max(np.abs(depth_head(Tensor(F), params).data - ref)) < 1e-9
    with pytest.raises(ShapeError):
        depth_head(Tensor(F), DepthHeadParams(params.convs[:2]))


@pytest.mark.parametrize("seed", range(20))
def test_depth_head_gradients(seed):
    rng = np.random.default_rng(seed)
    F = Tensor(rng.standard_normal((2, 2, 3)))
    params = depth_params(rng, 2, scale=0.5)
    params.convs[2].bias.data[:] = 5.0  # keep away from the clamp bounds
    probe = rng.standard_normal((1, 16, 24))
    inputs = [F] + params.parameters()

    def f(F, *_):
        return tsum(depth_head(F, params) * probe)

    assert grad_check(f, inputs, max_coords=12, rng=np.random.default_rng(seed)).passed


# -- total loss -----------------------------------------------------------------------

def test_weight_constants():
    assert LossWeights() == LossWeights(lambda_3d=0.4, alpha=2.0, beta=0.5)


def test_total_loss_arithmetic():
    assert total_loss({}) == 0.0
    assert total_loss({name: 0.0 for name in ("fcos", "ctr", "dim", "depth")}) == 0.0
    assert total_loss({"dim": 1.0}) == pytest.approx(0.8, abs=1e-15)
    assert total_loss({"loc": 1.0}) == pytest.approx(0.2, abs=1e-15)
    assert total_loss({"ctr": 1.0}) == pytest.approx(0.4, abs=1e-15)


def test_total_loss_matches_weighted_sum():
    rng = np.random.default_rng(12)
    names = ("fcos", "ctr", "dim", "ori", "loc", "attr", "mask", "pano", "depth")
    comps = dict(zip(names, rng.uniform(0, 5, size=9)))
    ref = (comps["fcos"] + 0.4 * (comps["ctr"] + 2 * comps["dim"] + comps["ori"] + 0.5 * comps["loc"] + comps["attr"])
           + comps["mask"] + comps["pano"] + comps["depth"])
    assert total_loss(comps) == pytest.approx(ref, abs=1e-12)
    as_tensors = total_loss({k: Tensor(v) for k, v in comps.items()})
    assert as_tensors.item() == pytest.approx(ref, abs=1e-12)


def test_total_loss_rejects_bad_components():
    with pytest.raises(NonFiniteLossError):
        total_loss({"dim": float("nan")})
    with pytest.raises(NonFiniteLossError):
        total_loss({"depth": Tensor(np.inf)})
    with pytest.raises(KeyError):
        total_loss({"size": 1.0})


def test_corner_ordering_matches_template():
    rng = np.random.default_rng(13)
    b = random_box(rng)
    np.testing.assert_allclose(box_corners(b), corner_template(b.center, b.dims, b.yaw), atol=1e-12)
