import json

import pytest

from app.engine import (
    EXIT_INPUT_ERROR,
    EXIT_NO_PLAN,
    EXIT_OK,
    end_to_end,
    load_cost_template,
    load_run_config,
)
from planner.errors import ConfigError
from planner.graph_core import save_graph

GPT_CONFIG = """
[graph]
generator = "gpt"
layers = 2
hidden = 4

[search]
world_size = 4
global_batch = 16
{extra_search}

[output]
dir = "out"
cache_dir = "cache"
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _config(tmp_path, extra_search=""):
    return _write(tmp_path, GPT_CONFIG.format(extra_search=extra_search))


def test_run_writes_every_artifact(tmp_path):
    assert end_to_end(_config(tmp_path)) == EXIT_OK

    out = tmp_path / "out"
    names = {p.name for p in out.iterdir()}
    assert names == {"best_plan.json", "schedule.json", "trace.json", "report.json", "pipeline.log"}
    assert list((tmp_path / "cache").glob("*.manifest.json"))

    best = json.loads((out / "best_plan.json").read_text(encoding="utf-8"))
    assert best["dp"] * best["tmp"] * best["pmp"] == 4
    assert best["hidden"] == 4

    schedule = json.loads((out / "schedule.json").read_text(encoding="utf-8"))
    assert schedule["stages"] == best["pmp"]
    assert schedule["microbatches"] == best["num_microbatches"]

    trace = json.loads((out / "trace.json").read_text(encoding="utf-8"))
    assert {e["pid"] for e in trace["traceEvents"]} == set(range(best["pmp"]))

    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["feasible"] == len(report["plans"])
    assert report["plans"][0]["makespan"] == pytest.approx(best["makespan"])


def test_repeated_runs_write_identical_bytes(tmp_path):
    config = _config(tmp_path, "pmp_candidates = [1, 2, 4]")
    assert end_to_end(config, out_dir=tmp_path / "first", cache_dir=tmp_path / "c1") == EXIT_OK
    assert end_to_end(config, out_dir=tmp_path / "second", cache_dir=tmp_path / "c2") == EXIT_OK
    for name in ("best_plan.json", "schedule.json", "trace.json", "report.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name


def test_graph_file_config(tmp_path, gpt_small):
    save_graph(gpt_small, tmp_path / "model.json")
    config = _write(tmp_path, """
[graph]
path = "model.json"
k = 8

[search]
world_size = 2
global_batch = 4
""")
    assert end_to_end(config, out_dir=tmp_path / "elsewhere", cache_dir=tmp_path / "c") == EXIT_OK
    assert (tmp_path / "elsewhere" / "best_plan.json").exists()


def test_missing_graph_leaves_no_output(tmp_path):
    config = _write(tmp_path, """
[graph]
path = "missing.json"

[search]
world_size = 2
global_batch = 4

[output]
dir = "out"
""")
    assert end_to_end(config) == EXIT_INPUT_ERROR
    assert not (tmp_path / "out").exists()


def test_tiny_capacity_has_no_plan(tmp_path):
    assert end_to_end(_config(tmp_path, "capacity = 1.0")) == EXIT_NO_PLAN


def test_unknown_key_is_an_input_error(tmp_path):
    assert end_to_end(_config(tmp_path, "colour = 3")) == EXIT_INPUT_ERROR
    with pytest.raises(ConfigError):
        load_run_config(_config(tmp_path, "colour = 3"))


def test_config_validation(tmp_path):
    both = _write(tmp_path, '[graph]\npath = "a.json"\ngenerator = "gpt"\n[search]\nworld_size = 1\nglobal_batch = 1\n')
    with pytest.raises(ConfigError):
        load_run_config(both)
    no_batch = _write(tmp_path, '[graph]\ngenerator = "gpt"\n[search]\nworld_size = 1\n', "b.toml")
    with pytest.raises(ConfigError):
        load_run_config(no_batch)
    broken = _write(tmp_path, "[graph\n", "c.toml")
    with pytest.raises(ConfigError):
        load_run_config(broken)
    assert end_to_end(tmp_path / "absent.toml") == EXIT_INPUT_ERROR


def test_lists_become_candidate_tuples(tmp_path):
    cfg = load_run_config(_config(tmp_path, "tmp_candidates = [1, 2]\nmicrobatch_candidates = [2]"))
    assert cfg.space.tmp_candidates == (1, 2)
    assert cfg.space.microbatch_candidates == (2,)
    assert cfg.out_dir == tmp_path / "out"


def test_unknown_generator(tmp_path):
    config = _write(tmp_path, '[graph]\ngenerator = "resnet"\n[search]\nworld_size = 1\nglobal_batch = 1\n')
    assert end_to_end(config, out_dir=tmp_path / "o") == EXIT_INPUT_ERROR


def test_cost_template_file(tmp_path):
    path = _write(tmp_path, "[costs]\ntime_per_param_sample = 2.0\np2p_bandwidth = 100.0\n", "costs.toml")
    template = load_cost_template(path)
    assert template.time_per_param_sample == 2.0
    assert template.p2p_bandwidth == 100.0

    stray = _write(tmp_path, "[costs]\n[search]\nworld_size = 1\n", "stray.toml")
    with pytest.raises(ConfigError):
        load_cost_template(stray)
    typo = _write(tmp_path, "[costs]\nbandwith = 1.0\n", "typo.toml")
    with pytest.raises(ConfigError):
        load_cost_template(typo)


@pytest.mark.parametrize("text", [
    '[graph]\ngenerator = "gpt"\nlayers = 2\nhidden = 4\n[search]\nworld_size = "8"\nglobal_batch = 16\n',
    '[graph]\ngenerator = "gpt"\nlayers = "2"\nhidden = 4\n[search]\nworld_size = 4\nglobal_batch = 16\n',
    '[graph]\ngenerator = "gpt"\nlayers = 2\nhidden = 4\n[search]\nworld_size = 4\nglobal_batch = 16\n'
    'tmp_candidates = ["1", "2"]\n',
    '[graph]\ngenerator = "gpt"\nlayers = 2\nhidden = 4\n[search]\nworld_size = 4\nglobal_batch = 16\n'
    '[costs]\np2p_bandwidth = "fast"\n',
])
def test_wrong_typed_values_are_input_errors(tmp_path, text):
    config = _write(tmp_path, text)
    with pytest.raises(ConfigError):
        load_run_config(config)
    assert end_to_end(config, out_dir=tmp_path / "o") == EXIT_INPUT_ERROR
    assert not (tmp_path / "o").exists()


def test_integer_capacity_and_zero_bandwidth_are_accepted(tmp_path):
    config = _write(
        tmp_path,
        GPT_CONFIG.format(extra_search="capacity = 16000000000") + "\n[costs]\np2p_bandwidth = 0\n",
    )
    cfg = load_run_config(config)
    assert cfg.space.capacity == 16e9
    assert not cfg.costs.p2p_bandwidth
