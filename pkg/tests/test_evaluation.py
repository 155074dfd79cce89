"""Test student finetuning, the protocol and the variant comparison."""
import numpy as np
import pytest
from common import TINY_CONFIG

from mitkd import ConfigError, ContractError
from mitkd.evaluation import (
    IN_DOMAIN,
    OUT_DOMAIN,
    CellStats,
    FinetuneHparams,
    RunResult,
    Summary,
    compare_variants,
    dev_accuracy,
    finetune_student,
    floor_cells,
    format_comparison,
    format_summary,
    protocol_label,
    run_protocol,
    summarize,
)
from mitkd.model import ModelConfig, init_model

HPARAMS = FinetuneHparams(epochs=(1,), batch_sizes=(16,), learning_rates=(1e-3,))


def _result(variant, protocol, seed, accuracy, task="t0", floor=0.5):
    return RunResult(variant, task, protocol, 1.0, seed, accuracy, {}, floor)


def test_empty_grid():
    """An empty hyper-parameter grid shall raise ConfigError."""
    with pytest.raises(ConfigError):
        FinetuneHparams(epochs=())
    with pytest.raises(ConfigError):
        FinetuneHparams(learning_rates=(0.0,))
    assert len(FinetuneHparams().grid()) == 12


@pytest.mark.parametrize(
    "in_family, fraction, label",
    [
        (True, 1.0, IN_DOMAIN),
        (False, 1.0, OUT_DOMAIN),
        (True, 0.1, "low-resource@0.1"),
        (False, 0.01, "low-resource@0.01"),
    ],
)
def test_protocol_label(in_family, fraction, label):
    assert protocol_label(in_family, fraction) == label


def test_run_result_contract():
    with pytest.raises(ContractError):
        _result("a", IN_DOMAIN, 0, 1.5)
    result = _result("a", IN_DOMAIN, 0, 0.5)
    assert result.at_floor
    assert RunResult.from_dict(result.to_dict()) == result


def test_finetune_student(suite, datasets):
    """Finetuning shall be deterministic and report a trained grid candidate."""
    spec = suite.tasks[0]
    train, dev = datasets[spec.name]
    student = init_model(TINY_CONFIG, 0)
    first = finetune_student(student, spec, HPARAMS, 3, train, dev, provenance="s")
    second = finetune_student(student, spec, HPARAMS, 3, train, dev, provenance="s")
    assert first == second
    assert first.majority_floor == pytest.approx(dev.majority_fraction())
    assert first.protocol == IN_DOMAIN
    assert student.heads == {}
    assert first.selected_hparams == {
        "epochs": 1,
        "batch_size": 16,
        "learning_rate": 1e-3,
    }


def test_finetune_selects_best_candidate(suite, datasets):
    """Selection shall pick the best grid point even when it sits at the floor."""
    spec = suite.tasks[0]
    train, dev = datasets[spec.name]
    student = init_model(TINY_CONFIG, 0)
    rates = (1e-3, 1e-5)
    singles = [
        finetune_student(
            student, spec, FinetuneHparams((1,), (16,), (rate,)), 3, train, dev
        )
        for rate in rates
    ]
    both = finetune_student(
        student, spec, FinetuneHparams((1,), (16,), rates), 3, train, dev
    )
    best = max(singles, key=lambda r: r.dev_accuracy)
    assert both.dev_accuracy == best.dev_accuracy
    assert both.selected_hparams == best.selected_hparams
    assert "predictor" not in both.selected_hparams


def test_finetune_student_existing_head(suite, datasets):
    spec = suite.tasks[0]
    student = init_model(TINY_CONFIG, 0)
    student.add_classification_head(spec.name, 2, 0)
    with pytest.raises(ContractError):
        finetune_student(student, spec, HPARAMS, 0, *datasets[spec.name])


def test_dev_accuracy(tiny_model, suite, datasets):
    spec = suite.tasks[0]
    tiny_model.add_classification_head(spec.name, spec.n_classes, 0)
    accuracy = dev_accuracy(tiny_model, spec.name, datasets[spec.name][1])
    assert 0.0 <= accuracy <= 1.0


def test_summarize_single_result():
    """One variant, one task, one seed shall aggregate to that result."""
    summary = summarize([_result("a", OUT_DOMAIN, 0, 0.625)])
    assert summary.mean("a", OUT_DOMAIN) == 0.625
    assert summary.cells[("a", OUT_DOMAIN)].sd == 0.0
    assert summary.ordering == ["a"]


def test_summarize_seed_level_sd():
    """Standard deviations shall be taken over per-seed means."""
    results = [
        _result("a", IN_DOMAIN, 0, 0.6, task="t0"),
        _result("a", IN_DOMAIN, 0, 0.8, task="t1"),
        _result("a", IN_DOMAIN, 1, 0.8, task="t0"),
        _result("a", IN_DOMAIN, 1, 1.0, task="t1"),
    ]
    stats = summarize(results).cells[("a", IN_DOMAIN)]
    assert stats.mean == pytest.approx(0.8)
    assert stats.sd == pytest.approx(np.std([0.7, 0.9], ddof=1))
    assert stats.count == 4


def test_ordering_by_out_domain():
    """Variants shall be ordered by decreasing out-domain mean."""
    results = [
        _result("low", OUT_DOMAIN, 0, 0.55),
        _result("high", OUT_DOMAIN, 0, 0.75),
        _result("mid", OUT_DOMAIN, 0, 0.65),
        _result("high", IN_DOMAIN, 0, 0.5),
    ]
    summary = summarize(results)
    assert summary.ordering == ["high", "mid", "low"]
    assert summary.protocols == [IN_DOMAIN, OUT_DOMAIN]


def test_compare_identical_variants():
    """Identical variants shall differ by zero and be inconclusive."""
    results = [
        _result(variant, OUT_DOMAIN, seed, accuracy)
        for variant in ("a", "b")
        for seed, accuracy in enumerate([0.6, 0.7, 0.65])
    ]
    report = compare_variants(summarize(results))
    pair = report.pairs[0]
    assert pair.difference == 0.0
    assert pair.inconclusive


def test_compare_conclusive():
    """A 10 point gap with 2 point deviations shall be conclusive."""
    summary = Summary(
        results=[],
        cells={
            ("a", OUT_DOMAIN): CellStats(0.70, 0.02, 4),
            ("b", OUT_DOMAIN): CellStats(0.60, 0.02, 4),
        },
        ordering=["a", "b"],
    )
    report = compare_variants(summary)
    pair = report.pair("a", "b", OUT_DOMAIN)
    assert pair.difference == pytest.approx(0.10)
    assert pair.pooled_sd == pytest.approx(0.02)
    assert not pair.inconclusive
    assert "conclusive" in format_comparison(report)
    with pytest.raises(KeyError):
        report.pair("b", "a", OUT_DOMAIN)


def test_compare_needs_two_variants():
    with pytest.raises(ContractError):
        compare_variants(summarize([_result("a", OUT_DOMAIN, 0, 0.6)]))


def test_floor_cells():
    """Cells where every variant sits at the majority floor shall be flagged."""
    results = [
        _result("a", OUT_DOMAIN, 0, 0.5, task="flat"),
        _result("b", OUT_DOMAIN, 0, 0.5, task="flat"),
        _result("a", OUT_DOMAIN, 0, 0.5, task="learnt"),
        _result("b", OUT_DOMAIN, 0, 0.9, task="learnt"),
    ]
    assert floor_cells(results) == [(OUT_DOMAIN, "flat")]


def test_format_summary():
    summary = summarize(
        [_result("a", OUT_DOMAIN, 0, 0.625), _result("b", OUT_DOMAIN, 0, 0.5)]
    )
    text = format_summary(summary)
    assert "a" in text and "b" in text
    assert "62.5" in text


def test_run_protocol_accounting(suite, datasets):
    """Every variant, task, fraction and seed shall produce exactly one result."""
    students = {"a": init_model(TINY_CONFIG, 0), "b": init_model(TINY_CONFIG, 1)}
    seen = []
    summary = run_protocol(
        students, suite, datasets, HPARAMS, (0.5, 1.0), 2, on_result=seen.append
    )
    assert len(summary.results) == len(seen) == 2 * 3 * 2 * 2
    assert {r.seed for r in summary.results} == {0, 1}
    assert set(summary.protocols) == {IN_DOMAIN, OUT_DOMAIN, "low-resource@0.5"}
    assert all(r.selected_hparams["epochs"] == 1 for r in summary.results)
    assert sorted(summary.ordering) == ["a", "b"]


def test_run_protocol_parallel(suite, datasets):
    """Parallel cells shall give the same results as sequential ones."""
    students = {"a": init_model(TINY_CONFIG, 0)}
    sequential = run_protocol(students, suite, datasets, HPARAMS, (1.0,), [5])
    parallel = run_protocol(students, suite, datasets, HPARAMS, (1.0,), [5], jobs=3)
    assert sequential.results == parallel.results


def test_run_protocol_degenerate(suite, datasets):
    """One variant, task and seed shall aggregate to that single accuracy."""
    single = type(suite)(suite.in_family[:1], ())
    summary = run_protocol(
        {"a": init_model(TINY_CONFIG, 0)}, single, datasets, HPARAMS, (1.0,), 1
    )
    (result,) = summary.results
    assert summary.mean("a", IN_DOMAIN) == result.dev_accuracy


def test_run_protocol_refusals(suite, datasets):
    """Mixed student shapes, missing students or data shall raise ConfigError."""
    other = ModelConfig(
        num_layers=1, hidden_size=4, num_heads=2, ffn_size=8, max_seq_len=16
    )
    student = {"a": init_model(TINY_CONFIG, 0)}
    mixed = dict(student, b=init_model(other, 0))
    with pytest.raises(ConfigError):
        run_protocol(mixed, suite, datasets, HPARAMS, (1.0,), 1)
    with pytest.raises(ConfigError):
        run_protocol({"a": None}, suite, datasets, HPARAMS, (1.0,), 1)
    with pytest.raises(ConfigError):
        run_protocol(student, suite, {}, HPARAMS, (1.0,), 1)
    with pytest.raises(ConfigError):
        run_protocol(student, suite, datasets, HPARAMS, (0.0,), 1)
    with pytest.raises(ConfigError):
        run_protocol(student, suite, datasets, HPARAMS, (1.0,), [])
