import numpy as np
import pytest

from morphcl.exceptions import ArchitectureError
from morphcl.schemas import ActivationKind, Architecture, LossKind, SearchConfig
from morphcl.services.netcore import forward, init_network, loss
from morphcl.services.search import (
    candidate_seed,
    direction_set,
    evaluate_candidate,
    ndds_search,
    poll_points,
    should_change,
    width_ceiling,
)

ARCH = Architecture.parse([1, 64, 64, 1])


def bowl(target=(1, 96, 32, 1)):
    def evaluate(arch, index=0):
        return 1.0 + sum((w - t) ** 2 for w, t in zip(arch.widths, target)) / 1000.0

    return evaluate


def test_direction_sets():
    assert len(direction_set(ARCH, "signed_multiples", (1, 2, 3))) == 12
    unit = direction_set(ARCH, "unit")
    assert unit == [(0, 1, 0, 0), (0, 0, 1, 0)]
    with pytest.raises(ValueError):
        direction_set(ARCH, "diagonal")


def test_poll_points_add_pairwise_sums_for_few_directions():
    polls = poll_points(ARCH, direction_set(ARCH, "unit"), 16)
    assert [p.widths for p in polls] == [(1, 80, 64, 1), (1, 64, 80, 1), (1, 80, 80, 1)]


def test_poll_points_drop_invalid_widths():
    small = Architecture.parse([1, 8, 8, 1])
    polls = poll_points(small, direction_set(small, "signed_multiples", (1,)), 16)
    assert all(min(p.widths) >= 1 for p in polls)
    assert (1, 24, 8, 1) in [p.widths for p in polls]
    assert len(polls) == 2


def test_poll_points_reject_io_directions():
    with pytest.raises(ArchitectureError):
        poll_points(ARCH, [(1, 0, 0, 0)], 16)


def test_search_descends_a_bowl():
    cfg = SearchConfig(step_size=16, threshold_ratio=0.35, max_rounds=10, multiples=(1,))
    evaluate = bowl()
    result = ndds_search(ARCH, evaluate, cfg)
    assert result.changed
    assert result.arch.widths == (1, 96, 32, 1)
    losses = [evaluate(a) for a in result.path]
    assert losses == sorted(losses, reverse=True)
    assert result.rounds <= cfg.max_rounds
    assert any(r.accepted for r in result.trace)


def test_ties_keep_incumbent():
    result = ndds_search(ARCH, lambda arch, index: 1.0, SearchConfig())
    assert not result.changed
    assert result.rounds == 1
    assert not any(r.accepted for r in result.trace)


def test_stops_once_threshold_reached():
    cfg = SearchConfig(step_size=16, threshold_ratio=0.99, max_rounds=10, multiples=(1,))
    result = ndds_search(ARCH, bowl(), cfg)
    assert result.rounds == 1


def test_parallel_candidates_match_serial():
    cfg = SearchConfig(step_size=16, threshold_ratio=0.5, max_rounds=4)
    serial = ndds_search(ARCH, bowl(), cfg)
    parallel = ndds_search(ARCH, bowl(), cfg.model_copy(update={"workers": 3}))
    assert [a.widths for a in serial.path] == [a.widths for a in parallel.path]
    assert [r.loss for r in serial.trace] == [r.loss for r in parallel.trace]


@pytest.mark.parametrize(
    "j_curr, j_prev, expected",
    [
        (1.2, 1.0, True),
        (1.1, 1.0, False),
        (0.5, 1.0, False),
        (1.0, 0.0, False),
        (float("nan"), 1.0, False),
        (float("inf"), 1.0, True),
    ],
)
def test_should_change(j_curr, j_prev, expected):
    assert should_change(j_curr, j_prev, 1.1) is expected


def test_evaluate_candidate_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(64, 1))
    y = np.sin(3 * x)
    arch = Architecture.parse([1, 8, 1])
    seed = candidate_seed(0, 1, 0)
    a = evaluate_candidate(arch, x, y, 20, seed)
    assert np.isfinite(a)
    assert a == evaluate_candidate(arch, x, y, 20, seed)


def test_evaluate_candidate_diverges_to_inf():
    x = np.ones((8, 1))
    y = np.full((8, 1), 1e200)
    assert evaluate_candidate(Architecture.parse([1, 4, 1]), x, y, 5, 0, lr=1.0) == float("inf")


def test_width_ceiling_caps_hidden_layers_only():
    assert width_ceiling(Architecture.parse([1, 8, 16, 1]), 4.0) == (1, 32, 64, 1)
    assert width_ceiling(ARCH, None) is None


def test_poll_points_respect_the_ceiling():
    small = Architecture.parse([1, 8, 8, 1])
    polls = poll_points(small, direction_set(small, "unit"), 8, ceiling=(1, 16, 12, 1))
    assert [p.widths for p in polls] == [(1, 16, 8, 1)]
    with pytest.raises(ArchitectureError):
        poll_points(small, direction_set(small, "unit"), 8, ceiling=(1, 16, 1))


def test_search_never_leaves_the_ceiling():
    cfg = SearchConfig(step_size=16, threshold_ratio=0.1, max_rounds=10, multiples=(1,))
    result = ndds_search(ARCH, bowl(target=(1, 400, 400, 1)), cfg, ceiling=(1, 96, 96, 1))
    assert result.changed
    assert all(w <= 96 for a in result.path for w in a.widths)


def test_candidate_indices_follow_first_appearance():
    seen = []

    def record(arch, index):
        seen.append((index, arch.widths))
        return bowl()(arch)

    cfg = SearchConfig(step_size=16, threshold_ratio=0.35, max_rounds=3, multiples=(1,))
    ndds_search(ARCH, record, cfg)
    assert seen[0] == (0, ARCH.widths)
    assert [i for i, _ in seen] == list(range(len(seen)))
    assert len({w for _, w in seen}) == len(seen)


def test_parallel_candidates_get_the_serial_indices():
    def indexed(log):
        def evaluate(arch, index):
            log[arch.widths] = index
            return bowl()(arch)

        return evaluate

    cfg = SearchConfig(step_size=16, threshold_ratio=0.5, max_rounds=4)
    serial, parallel = {}, {}
    ndds_search(ARCH, indexed(serial), cfg)
    ndds_search(ARCH, indexed(parallel), cfg.model_copy(update={"workers": 3}))
    assert serial == parallel


def test_candidate_seed_ignores_the_architecture():
    assert candidate_seed(3, 1, 2) == [3, 1, 2]


def _fit_rows(n=64, seed=0):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(n, 1))
    return x, np.sin(3 * x)


def test_untrained_candidate_scores_its_initial_loss():
    x, y = _fit_rows()
    arch = Architecture.parse([1, 8, 1])
    seed = candidate_seed(0, 1, 0)
    init_seed = int(np.random.SeedSequence(seed).generate_state(2)[0])
    net = init_network(arch, ActivationKind.RELU, init_seed)
    assert evaluate_candidate(arch, x, y, 0, seed) == loss(forward(net, x), y, LossKind.MSE)


def test_candidate_is_scored_on_validation_rows():
    x, y = _fit_rows()
    x_v, y_v = _fit_rows(32, seed=1)
    arch = Architecture.parse([1, 8, 1])
    on_train = evaluate_candidate(arch, x, y, 10, 0)
    on_validation = evaluate_candidate(arch, x, y, 10, 0, validation=(x_v, y_v))
    far = evaluate_candidate(arch, x, y, 10, 0, validation=(x_v, y_v + 5.0))
    assert np.isfinite(on_validation)
    assert on_validation != on_train
    assert far > on_validation


def test_candidate_training_includes_replay():
    x, y = _fit_rows()
    replay = _fit_rows(32, seed=2)
    arch = Architecture.parse([1, 8, 1])
    alone = evaluate_candidate(arch, x, y, 10, 0, task=1)
    with_replay = evaluate_candidate(arch, x, y, 10, 0, task=1, replay=replay)
    assert alone != with_replay
