import numpy as np
import pytest

from triad.autodiff import Tensor
from triad.gradcheck import gradcheck
from triad import losses
from triad.losses import (
    ClasswiseEmbeddings, EmbeddingBatch, LossInputError, LossWeights,
    NoPositivesError, NoValidAnchorsError, classwise_mean_embeddings,
    contrastive_distribution, cross_entropy, embedding_dissimilarity_loss,
    embedding_similarity_loss, focal_loss, match_distribution,
    multi_positive_contrastive_loss, total_loss,
)

TOL = 1e-6


def unit_rows(rng, n, e):
    z = rng.normal(size=(n, e))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def make_batch(rng, n=8, e=4, path="common"):
    z = unit_rows(rng, n, e)
    labels = rng.integers(0, 2, size=n)
    # guarantee at least one anchor has a positive
    labels[0] = labels[1] = 0
    return EmbeddingBatch(Tensor(z), labels, path)


def loop_contrastive(z, labels, tau):
    """Anchor-by-anchor reference built from the single-anchor pieces."""
    n = z.shape[0]
    per_anchor = []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        try:
            p = match_distribution(labels[i], labels[others])
        except NoPositivesError:
            continue
        q = contrastive_distribution(z[i], z[others], tau)
        per_anchor.append(cross_entropy(p, q))
    return float(np.mean(per_anchor))


# -- single-anchor building blocks -------------------------------------------

def test_contrastive_distribution_two_candidates_frozen():
    anchor = np.array([1.0, 0.0])
    cands = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = contrastive_distribution(anchor, cands, tau=1.0)
    # softmax of (1, 0)
    assert np.allclose(q, [0.7310585786300049, 0.2689414213699951], atol=1e-12)
    assert np.isclose(q.sum(), 1.0)


def test_contrastive_distribution_temperature_sharpens():
    anchor = np.array([1.0, 0.0])
    cands = np.array([[1.0, 0.0], [0.0, 1.0]])
    soft = contrastive_distribution(anchor, cands, tau=1.0)
    sharp = contrastive_distribution(anchor, cands, tau=0.1)
    assert sharp[0] > soft[0]


def test_contrastive_distribution_survives_extreme_temperature():
    rng = np.random.default_rng(0)
    z = unit_rows(rng, 6, 3)
    q = contrastive_distribution(z[0], z[1:], tau=1e-3)
    assert np.all(np.isfinite(q))
    assert np.isclose(q.sum(), 1.0)


def test_contrastive_distribution_validates_inputs():
    with pytest.raises(LossInputError, match="temperature"):
        contrastive_distribution(np.array([1.0, 0.0]),
                                 np.array([[1.0, 0.0]]), tau=0.0)
    with pytest.raises(LossInputError, match="norm"):
        contrastive_distribution(np.array([2.0, 0.0]),
                                 np.array([[1.0, 0.0]]), tau=1.0)
    with pytest.raises(LossInputError, match="norm"):
        contrastive_distribution(np.array([1.0, 0.0]),
                                 np.array([[3.0, 4.0]]), tau=1.0)


def test_match_distribution_uniform_over_matches():
    p = match_distribution(1, np.array([0, 1, 1, 0, 1]))
    assert np.allclose(p, [0.0, 1 / 3, 1 / 3, 0.0, 1 / 3])


def test_match_distribution_raises_without_positives():
    with pytest.raises(NoPositivesError):
        match_distribution(1, np.array([0, 0, 0]))


def test_cross_entropy_frozen_value():
    p = np.array([0.5, 0.5])
    q = np.array([0.7310585786300049, 0.2689414213699951])
    assert np.isclose(cross_entropy(p, q), 0.8132616875182228, atol=1e-12)


def test_cross_entropy_ignores_zero_p_and_floors_q():
    # q == 0 where p == 0 must not produce nan
    assert cross_entropy(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    # q == 0 where p > 0 hits the floor instead of -inf
    val = cross_entropy(np.array([1.0]), np.array([0.0]))
    assert np.isclose(val, -np.log(1e-12))


# -- batch contrastive loss ---------------------------------------------------

def test_contrastive_loss_frozen_three_sample_case():
    # anchors 0 and 1 each see one positive (sim 1) and one negative (sim 0):
    # per-anchor H = ln(1 + exp(-1)); anchor 2 has no positives
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    batch = EmbeddingBatch(Tensor(z), np.array([0, 0, 1]))
    loss = multi_positive_contrastive_loss(batch, tau=1.0)
    assert np.isclose(loss.item(), 0.31326168751822286, atol=1e-12)


def test_contrastive_loss_two_same_label_samples_is_zero():
    # a single candidate gets softmax mass 1 whatever the similarity
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = EmbeddingBatch(Tensor(z), np.array([1, 1]))
    assert multi_positive_contrastive_loss(batch, tau=0.5).item() == 0.0


@pytest.mark.parametrize("seed", range(8))
def test_contrastive_loss_matches_anchor_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    batch = make_batch(rng, n=n, e=5)
    for tau in (0.07, 0.5, 1.0):
        got = multi_positive_contrastive_loss(batch, tau).item()
        want = loop_contrastive(batch.z.data, batch.labels, tau)
        assert np.isclose(got, want, atol=1e-9), (tau, got, want)


def test_contrastive_loss_skips_anchor_without_positives():
    rng = np.random.default_rng(3)
    z = unit_rows(rng, 5, 4)
    labels = np.array([0, 0, 0, 0, 1])   # sample 4 has no positives
    batch = EmbeddingBatch(Tensor(z), labels)
    got = multi_positive_contrastive_loss(batch, 0.5).item()
    want = loop_contrastive(z, labels, 0.5)
    assert np.isclose(got, want, atol=1e-9)


def test_contrastive_loss_all_singletons_raises():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = EmbeddingBatch(Tensor(z), np.array([0, 1]))
    with pytest.raises(NoValidAnchorsError):
        multi_positive_contrastive_loss(batch, 1.0)


def test_contrastive_loss_validates_batch():
    with pytest.raises(LossInputError, match="N >= 2"):
        multi_positive_contrastive_loss(
            EmbeddingBatch(Tensor(np.array([[1.0, 0.0]])), np.array([0])), 1.0)
    with pytest.raises(LossInputError, match="temperature"):
        batch = EmbeddingBatch(Tensor(np.eye(2)), np.array([0, 0]))
        multi_positive_contrastive_loss(batch, -1.0)
    with pytest.raises(LossInputError, match="norm"):
        EmbeddingBatch(Tensor(np.array([[2.0, 0.0], [1.0, 0.0]])),
                       np.array([0, 0]))


@pytest.mark.parametrize("seed", range(3))
def test_contrastive_loss_gradcheck(seed):
    rng = np.random.default_rng(50 + seed)
    raw = rng.normal(size=(6, 4))
    labels = np.array([0, 0, 1, 1, 0, 1])

    def fn(x):
        z = x.l2_normalize_rows()
        return multi_positive_contrastive_loss(EmbeddingBatch(z, labels), 0.3)

    assert float(gradcheck(fn, raw)) < TOL


# -- focal loss ---------------------------------------------------------------

def test_focal_loss_frozen_value():
    # logit 0, target 1, gamma 2, alpha 0.25:
    # 0.25 * (1 - 0.5)^2 * (-log 0.5) = 0.0625 * log 2
    loss = focal_loss(Tensor(np.array([0.0])), np.array([1.0]),
                      gamma=2.0, alpha=0.25)
    assert np.isclose(loss.item(), 0.25 * 0.25 * np.log(2.0), atol=1e-12)


def test_focal_loss_gamma_zero_is_weighted_bce():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=10) * 2.0
    targets = (rng.random(10) > 0.5).astype(np.float64)
    alpha = 0.3
    got = focal_loss(Tensor(logits), targets, gamma=0.0, alpha=alpha).item()
    s = 1.0 / (1.0 + np.exp(-logits))
    bce = -(targets * np.log(s) + (1 - targets) * np.log(1 - s))
    weights = np.where(targets == 1.0, alpha, 1 - alpha)
    assert np.isclose(got, float(np.mean(weights * bce)), atol=1e-9)


def test_focal_loss_downweights_easy_examples():
    easy = focal_loss(Tensor(np.array([6.0])), np.array([1.0]), 2.0, 0.25)
    hard = focal_loss(Tensor(np.array([-6.0])), np.array([1.0]), 2.0, 0.25)
    bce_easy = focal_loss(Tensor(np.array([6.0])), np.array([1.0]), 0.0, 0.25)
    bce_hard = focal_loss(Tensor(np.array([-6.0])), np.array([1.0]), 0.0, 0.25)
    # focusing suppresses the easy example far more than the hard one
    assert easy.item() / bce_easy.item() < 0.01
    assert hard.item() / bce_hard.item() > 0.9


def test_focal_loss_extreme_logits_stay_finite():
    logits = Tensor(np.array([-40.0, 40.0, -40.0, 40.0]))
    targets = np.array([1.0, 0.0, 0.0, 1.0])
    loss = focal_loss(logits, targets, gamma=2.0, alpha=0.25)
    assert np.isfinite(loss.item())


def test_focal_loss_validates_inputs():
    with pytest.raises(LossInputError, match="gamma"):
        focal_loss(Tensor(np.zeros(2)), np.zeros(2), gamma=-1.0, alpha=0.25)
    with pytest.raises(LossInputError, match="alpha"):
        focal_loss(Tensor(np.zeros(2)), np.zeros(2), gamma=2.0, alpha=1.0)
    with pytest.raises(LossInputError, match="binary"):
        focal_loss(Tensor(np.zeros(2)), np.array([0.0, 0.5]), 2.0, 0.25)
    with pytest.raises(LossInputError):
        focal_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), 2.0, 0.25)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_focal_loss_gradcheck(gamma):
    rng = np.random.default_rng(60)
    point = rng.normal(size=8) * 2.0
    targets = (rng.random(8) > 0.5).astype(np.float64)

    def fn(x):
        return focal_loss(x, targets, gamma=gamma, alpha=0.25)

    assert float(gradcheck(fn, point)) < TOL


# -- classwise embedding losses -----------------------------------------------

def test_classwise_means_and_presence_mask():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    batch = EmbeddingBatch(Tensor(z), np.array([0, 0, 0]))
    cw = classwise_mean_embeddings(batch)
    assert cw.present.tolist() == [True, False]
    assert np.allclose(cw.means[0].data, [2 / 3, 1 / 3])
    assert cw.means[1] is None


def test_classwise_means_are_not_renormalized():
    # opposite unit vectors average to a short vector; its length must survive
    z = np.array([[1.0, 0.0], [-0.6, 0.8]])
    batch = EmbeddingBatch(Tensor(z), np.array([0, 0]))
    cw = classwise_mean_embeddings(batch)
    assert np.isclose(np.linalg.norm(cw.means[0].data),
                      np.linalg.norm([0.2, 0.4]))


def cw(path, *means):
    present = np.array([m is not None for m in means])
    tensors = [Tensor(np.asarray(m, dtype=np.float64), requires_grad=True)
               if m is not None else None for m in means]
    return ClasswiseEmbeddings(means=tensors, present=present, path=path)


def test_similarity_loss_frozen_single_class():
    w_c = cw("common", [1.0, 0.0], None)
    w_p = cw("pediatric", [1.0, 0.0], None)
    w_a = cw("adult", [0.0, 1.0], None)
    # SIM(c,a) = 0, SIM(c,p) = 1
    assert np.isclose(
        embedding_similarity_loss(w_c, w_p, w_a).item(), 1.0, atol=1e-12)
    assert np.isclose(
        embedding_similarity_loss(w_c, w_p, w_a, mixed_sign=True).item(),
        3.0, atol=1e-12)


def test_similarity_loss_zero_when_all_aligned():
    m = [0.6, 0.8]
    loss = embedding_similarity_loss(cw("common", m, m), cw("pediatric", m, m),
                                     cw("adult", m, m))
    assert np.isclose(loss.item(), 0.0, atol=1e-12)


def test_similarity_loss_skips_class_missing_anywhere():
    w_c = cw("common", [1.0, 0.0], [0.0, 1.0])
    w_p = cw("pediatric", [1.0, 0.0], None)
    w_a = cw("adult", [1.0, 0.0], [0.0, 1.0])
    # class 1 absent from the pediatric batch: only class 0 contributes
    assert np.isclose(embedding_similarity_loss(w_c, w_p, w_a).item(), 0.0,
                      atol=1e-12)


def test_similarity_loss_skips_degenerate_mean_and_counts_it():
    losses.counters.reset()
    w_c = cw("common", [0.0, 0.0], None)
    w_p = cw("pediatric", [1.0, 0.0], None)
    w_a = cw("adult", [1.0, 0.0], None)
    assert embedding_similarity_loss(w_c, w_p, w_a).item() == 0.0
    assert losses.counters.degenerate_class_means == 1


def test_dissimilarity_loss_hinge_and_pairs():
    # cosine 0.5 between the two means; both ordered pairs contribute
    w = cw("common", [1.0, 0.0], [0.5, np.sqrt(3) / 2])
    assert np.isclose(embedding_dissimilarity_loss(w).item(), 1.0, atol=1e-12)
    # obtuse means fall on the flat side of the hinge
    w2 = cw("common", [1.0, 0.0], [-0.5, np.sqrt(3) / 2])
    assert embedding_dissimilarity_loss(w2).item() == 0.0


def test_dissimilarity_loss_single_class_is_zero():
    w = cw("common", [1.0, 0.0], None)
    assert embedding_dissimilarity_loss(w).item() == 0.0


@pytest.mark.parametrize("mixed", [False, True])
def test_similarity_loss_gradcheck(mixed):
    rng = np.random.default_rng(70)
    fixed_p = rng.normal(size=(2, 3))
    fixed_a = rng.normal(size=(2, 3))

    def fn(x):
        w_c = ClasswiseEmbeddings(
            means=[x.take_rows([0]).reshape(3), x.take_rows([1]).reshape(3)],
            present=np.array([True, True]))
        w_p = cw("pediatric", fixed_p[0], fixed_p[1])
        w_a = cw("adult", fixed_a[0], fixed_a[1])
        return embedding_similarity_loss(w_c, w_p, w_a, mixed_sign=mixed)

    assert float(gradcheck(fn, rng.normal(size=(2, 3)))) < TOL


def test_dissimilarity_loss_gradcheck():
    rng = np.random.default_rng(71)
    point = rng.normal(size=(2, 3))
    point[1] = point[0] + 0.3 * rng.normal(size=3)  # acute pair, off the hinge

    def fn(x):
        w = ClasswiseEmbeddings(
            means=[x.take_rows([0]).reshape(3), x.take_rows([1]).reshape(3)],
            present=np.array([True, True]))
        return embedding_dissimilarity_loss(w)

    assert float(gradcheck(fn, point)) < TOL


def test_embedding_losses_through_batch_gradcheck():
    rng = np.random.default_rng(72)
    labels = np.array([0, 1, 0, 1])

    def fn(x):
        z = x.l2_normalize_rows()
        w = classwise_mean_embeddings(EmbeddingBatch(z, labels))
        fixed = cw("pediatric", [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        return (embedding_similarity_loss(w, fixed, fixed)
                + embedding_dissimilarity_loss(w))

    assert float(gradcheck(fn, rng.normal(size=(4, 3)))) < TOL


# -- total --------------------------------------------------------------------

def test_total_loss_weighted_sum_and_breakdown():
    comps = {
        "focal_c": Tensor(np.array(2.0)),
        "cont_c": Tensor(np.array(3.0)),
        "emb_sim": Tensor(np.array(0.5)),
        "emb_dissim": Tensor(np.array(0.25)),
    }
    weights = LossWeights(lambda_cls=1.0, lambda_cont=0.4, lambda_emb=2.0)
    breakdown, total = total_loss(comps, weights)
    assert np.isclose(total.item(), 2.0 + 0.4 * 3.0 + 2.0 * 0.75)
    assert breakdown.focal_c == 2.0
    assert breakdown.cont_c == 3.0
    assert breakdown.emb_sim == 0.5
    assert breakdown.focal_p == 0.0
    assert np.isclose(breakdown.total, total.item())


def test_total_loss_zero_weight_component_stays_out_of_graph():
    x = Tensor(np.array(1.5), requires_grad=True)
    comps = {"focal_c": x * 2.0, "cont_c": x * 10.0}
    weights = LossWeights(lambda_cls=1.0, lambda_cont=0.0, lambda_emb=1.0)
    breakdown, total = total_loss(comps, weights)
    total.backward()
    assert np.allclose(x.grad, 2.0)       # only the focal path contributes
    assert breakdown.cont_c == 15.0       # but the value is still recorded


def test_total_loss_missing_components_count_as_zero():
    breakdown, total = total_loss({"focal_p": Tensor(np.array(1.0))},
                                  LossWeights())
    assert total.item() == 1.0
    assert breakdown.cont_c == 0.0 and breakdown.emb_sim == 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(LossInputError):
        LossWeights(lambda_cls=-0.1)
