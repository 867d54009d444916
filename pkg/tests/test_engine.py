import numpy as np
import pytest

from morphcl.exceptions import ConfigError
from morphcl.schemas import Condition, GradWeights, ScheduleKind, SineTaskSpec
from morphcl.services.engine import (
    CURRENT,
    REPLAY,
    adapt_weights,
    condition_config,
    default_evaluator,
    derive_seed,
    holdout,
    search_subset,
    step_seed,
    train_task,
    warmup,
)
from morphcl.services.netcore import forward, init_network
from morphcl.services.replay import ReplayBuffer
from morphcl.services.tasks import Dataset, gen_sine_task, split_sequence


def test_seeds_are_deterministic_per_stream():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert step_seed(0, 1, 5, CURRENT) != step_seed(0, 1, 5, REPLAY)


@pytest.mark.parametrize(
    "ratio, alpha, beta",
    [(1.0, 0.3, 0.6), (1.5, 0.5, 0.4), (2.0, 0.7, 0.2), (5.0, 0.7, 0.2), (0.5, 0.1, 0.8)],
)
def test_adapt_weights(ratio, alpha, beta):
    w = adapt_weights(ratio, 1.0)
    assert w.alpha == pytest.approx(alpha)
    assert w.beta == pytest.approx(beta)
    assert w.gamma == 0.1


def test_adapt_weights_without_history():
    assert adapt_weights(1.0, 0.0) == GradWeights()


def test_condition_config(tiny_config):
    c1 = condition_config(tiny_config, Condition.C1)
    assert c1.warmup_epochs == 0
    assert c1.schedule is ScheduleKind.CONSTANT
    assert condition_config(tiny_config, Condition.C4) is tiny_config


def test_c1_refuses_warmup(tiny_config, small_net, sine_tasks):
    buf = ReplayBuffer(100)
    with pytest.raises(ConfigError):
        train_task(Condition.C1, small_net, sine_tasks[0], buf, tiny_config, 0)


def test_warmup_runs_at_reduced_rate(tiny_config, small_net, sine_tasks):
    result = warmup(small_net, sine_tasks[0].train, 4, 1e-3, tiny_config)
    assert len(result.losses) == 4
    assert len(result.hamiltonian) == 4
    assert result.lr == pytest.approx(1e-4)


def test_warmup_loss_does_not_increase_on_smooth_data(tiny_config, small_net):
    x = np.linspace(-1, 1, 64).reshape(-1, 1)
    train = Dataset(x=x, y=np.sin(2 * x), task_id=0)
    cfg = tiny_config.model_copy(update={"batch_size": 64})
    result = warmup(small_net, train, 6, 1e-2, cfg)
    assert all(b <= a for a, b in zip(result.losses, result.losses[1:]))


def test_warmup_measures_replay_in_its_hamiltonian(tiny_config, small_net, sine_tasks):
    buf = ReplayBuffer(1000)
    buf.add_task(sine_tasks[0].train.x, sine_tasks[0].train.y, 0)
    w = GradWeights(alpha=0.5, beta=0.5, gamma=0.0)
    with_replay = warmup(small_net, sine_tasks[1].train, 3, 1e-3, tiny_config, t=1, buf=buf, weights=w)
    alone = warmup(small_net, sine_tasks[1].train, 3, 1e-3, tiny_config, t=1, weights=w)
    assert with_replay.losses == alone.losses
    assert with_replay.hamiltonian != alone.hamiltonian
    assert alone.hamiltonian == pytest.approx([0.5 * v for v in alone.losses])


def test_search_subset_mixes_replay(sine_tasks):
    buf = ReplayBuffer(1000)
    current, replay = search_subset(sine_tasks[1].train, buf, 40, 0)
    assert current[0].shape == (40, 1)
    assert replay is None
    buf.add_task(sine_tasks[0].train.x, sine_tasks[0].train.y, 0)
    current, replay = search_subset(sine_tasks[1].train, buf, 40, 0)
    assert current[0].shape == (20, 1)
    assert replay[0].shape == (20, 1) and replay[1].shape == (20, 1)


def test_holdout_splits_off_the_tail():
    x = np.arange(8.0).reshape(-1, 1)
    fit, val = holdout((x, x), 0.25)
    assert fit[0].ravel().tolist() == [0, 1, 2, 3, 4, 5]
    assert val[0].ravel().tolist() == [6, 7]
    assert holdout((x, x), 0.0) == ((x, x), None)
    assert holdout(None, 0.25) == (None, None)


def test_default_evaluator_is_seeded_by_candidate_index(tiny_config, sine_tasks):
    buf = ReplayBuffer(1000)
    buf.add_task(sine_tasks[0].train.x, sine_tasks[0].train.y, 0)
    evaluate = default_evaluator(sine_tasks[1], buf, tiny_config, 1, 0)
    arch = tiny_config.initial_architecture()
    assert np.isfinite(evaluate(arch, 0))
    assert evaluate(arch, 0) == default_evaluator(sine_tasks[1], buf, tiny_config, 1, 0)(arch, 0)
    assert evaluate(arch, 0) != evaluate(arch, 1)


def _net(cfg):
    return init_network(cfg.initial_architecture(), cfg.activation, 0)


def test_first_task_is_identical_across_conditions(tiny_config, sine_tasks):
    outputs = []
    for cond in Condition:
        cfg = condition_config(tiny_config, cond)
        result = train_task(cond, _net(cfg), sine_tasks[0], ReplayBuffer(1000), cfg, 0)
        outputs.append(forward(result.net, sine_tasks[0].test.x))
        assert len(result.log.epochs) == cfg.epochs_per_task
    for out in outputs[1:]:
        assert np.array_equal(out, outputs[0])


def test_task_end_fills_buffer(tiny_config, sine_tasks):
    cfg = condition_config(tiny_config, Condition.C1)
    buf = ReplayBuffer(1000)
    train_task(Condition.C1, _net(cfg), sine_tasks[0], buf, cfg, 0)
    assert buf.task_ids == [0]
    assert buf.task_size(0) == len(sine_tasks[0].train)


def _prefers_wider(arch, index):
    return 1.0 / sum(arch.hidden)


def _keeps_incumbent(arch, index):
    return 1.0


def _two_tasks(cond, cfg, tasks, evaluator):
    buf = ReplayBuffer(1000)
    first = train_task(cond, _net(cfg), tasks[0], buf, cfg, 0)
    second = train_task(
        cond,
        first.net,
        tasks[1],
        buf,
        cfg,
        1,
        j_prev=first.log.tail_mean(cfg.loss_window),
        grad_weights=first.log.grad_weights,
        eval_sets=[s.test for s in tasks],
        evaluator=evaluator,
    )
    return first, second


@pytest.mark.parametrize("cond, mode", [(Condition.C3, "reinit"), (Condition.C4, "awb")])
def test_loss_jump_triggers_architecture_change(tiny_config, sine_tasks, cond, mode):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    first, second = _two_tasks(cond, cfg, sine_tasks, _prefers_wider)
    assert second.log.arch_changed
    assert second.net.arch.widths != first.net.arch.widths
    [record] = second.log.morphs
    assert record.mode == mode
    assert record.arch_old == [1, 8, 8, 1]
    assert any(r.replay_test_metric is not None for r in second.log.epochs)
    assert any(r.phase == "warmup" for r in second.log.epochs)


def test_epoch_numbers_continue_after_warmup(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    _, second = _two_tasks(Condition.C4, cfg, sine_tasks, _prefers_wider)
    epochs = [r.epoch for r in second.log.epochs]
    assert epochs == list(range(cfg.warmup_epochs + cfg.epochs_per_task))


def test_kept_search_is_a_morph_row(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    _, second = _two_tasks(Condition.C4, cfg, sine_tasks, _keeps_incumbent)
    assert not second.log.arch_changed
    [record] = second.log.morphs
    assert record.mode == "kept"
    assert record.arch_old == record.arch_new == [1, 8, 8, 1]
    assert record.loss_gap == 0.0
    assert record.pre_loss == record.post_loss


def test_failed_search_is_kept(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    _, second = _two_tasks(Condition.C4, cfg, sine_tasks, lambda arch, index: float("inf"))
    [record] = second.log.morphs
    assert record.mode == "kept"


def test_kept_search_trains_like_c2(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    _, c4 = _two_tasks(Condition.C4, cfg, sine_tasks, _keeps_incumbent)
    _, c2 = _two_tasks(Condition.C2, cfg, sine_tasks, _keeps_incumbent)
    assert c2.log.morphs == []
    assert np.array_equal(forward(c4.net, sine_tasks[1].test.x), forward(c2.net, sine_tasks[1].test.x))
    assert [r.model_dump() for r in c4.log.epochs] == [r.model_dump() for r in c2.log.epochs]


def test_weights_adapt_to_the_warmup_hamiltonian(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e9})
    first, second = _two_tasks(Condition.C2, cfg, sine_tasks, None)
    j_prev = first.log.tail_mean(cfg.loss_window)
    assert j_prev == pytest.approx(
        np.mean([r.hamiltonian_loss for r in first.log.epochs if r.phase == "train"][-cfg.loss_window:])
    )
    warm = [r for r in second.log.epochs if r.phase == "warmup"]
    j_curr = float(np.mean([r.hamiltonian_loss for r in warm][-cfg.loss_window:]))
    assert second.log.grad_weights == adapt_weights(j_curr, j_prev)
    assert any(r.hamiltonian_loss != r.current_loss for r in warm)


def test_c2_never_searches(tiny_config, sine_tasks):
    cfg = tiny_config.model_copy(update={"theta_loss": 1e-3})
    _, second = _two_tasks(Condition.C2, cfg, sine_tasks, _prefers_wider)
    assert not second.log.arch_changed
    assert second.log.search == []
    assert second.log.morphs == []


def _smooth_tasks():
    specs = [
        SineTaskSpec(amplitude=1.0, phase=0.0, domain=(-3.0, 3.0), n_samples=400),
        SineTaskSpec(amplitude=1.5, phase=1.0, domain=(-3.0, 3.0), n_samples=400),
    ]
    raw = [gen_sine_task(spec, [0, t], task_id=t) for t, spec in enumerate(specs)]
    return split_sequence([Dataset(x=ds.x / 3.0, y=ds.y, task_id=ds.task_id) for ds in raw], 0.8, 0)


def test_morph_beats_reinit_right_after_a_change(tiny_config):
    tasks = _smooth_tasks()
    long_cfg = tiny_config.model_copy(
        update={"theta_loss": 1e-3, "epochs_per_task": 300, "batch_size": 64, "lr": 1e-2, "hidden": [16, 16], "ab_epochs": 20}
    )
    short_cfg = long_cfg.model_copy(update={"epochs_per_task": 15})
    finals = {}
    for cond in (Condition.C3, Condition.C4):
        buf = ReplayBuffer(1000)
        first = train_task(cond, _net(long_cfg), tasks[0], buf, long_cfg, 0)
        second = train_task(
            cond,
            first.net,
            tasks[1],
            buf,
            short_cfg,
            1,
            j_prev=first.log.tail_mean(long_cfg.loss_window),
            grad_weights=first.log.grad_weights,
            evaluator=_prefers_wider,
        )
        assert second.log.arch_changed
        finals[cond] = second.log.tail_mean(short_cfg.loss_window)
    assert finals[Condition.C4] < finals[Condition.C3]
