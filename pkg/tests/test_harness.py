import json

import pytest

from cgfuse import cli
from cgfuse.code_graph import AlignmentError, Relation, from_json
from cgfuse.frontend import tokenize
from cgfuse.fusion import FusionPlan
from cgfuse.gnn import GnnConfig
from cgfuse.harness.corpus import Example, FormatError, load_corpus, parse_corpus_lines, save_corpus
from cgfuse.harness.experiment import (
    ExperimentError, ExperimentSpec, Variant, extract_graph, prepare, run_experiment, spec_from_config,
    spec_to_config,
)
from cgfuse.harness.synthetic import generate_synthetic

SAMPLE_NL = ("Actually walks the bag to make sure the count is correct and resets the running total "
          "@return the current total size")
SAMPLE_CODE = "int calcTotalSize() {\n    _total = extractList().size();\n    return _total;\n}"


def tiny_spec(**kw) -> ExperimentSpec:
    base = dict(synthetic_train=40, synthetic_test=8, vocab_size=300, enc_layers=1, dec_layers=1, hidden_dim=16,
                heads=2, ffn_dim=32, max_len=128, dropout=0.1, epochs=1, batch_size=8, pretrain_epochs=1,
                generate=True, max_steps=6)
    return ExperimentSpec(**{**base, **kw})


def gin(lam=1.0, layers=1, warmup=1) -> FusionPlan:
    return FusionPlan(lam, gnn=GnnConfig("GIN", layers, 16), warmup_epochs=warmup)


# ---------------------------------------------------------------------------
# corpus


def test_empty_corpus_file(tmp_path):
    (tmp_path / "c.jsonl").write_text("")
    assert load_corpus(tmp_path / "c.jsonl") == []


def test_one_line_corpus():
    assert parse_corpus_lines(['{"nl": "get x", "code": "return x;"}']) == [Example("get x", "return x;")]


def test_sample_corpus_line_loads_verbatim(tmp_path):
    path = tmp_path / "fig.jsonl"
    path.write_text(json.dumps({"nl": SAMPLE_NL, "code": SAMPLE_CODE}) + "\n")
    [ex] = load_corpus(path)
    assert ex.nl == SAMPLE_NL and ex.code == SAMPLE_CODE
    assert extract_graph(ex.code) is not None


def test_corpus_round_trip_preserves_order(tmp_path):
    ex = generate_synthetic(30, seed=4)
    save_corpus(tmp_path / "c.jsonl", ex)
    assert load_corpus(tmp_path / "c.jsonl") == ex


@pytest.mark.parametrize("line, reason", [
    ("not json", "invalid JSON"),
    ("[1, 2]", "not an object"),
    ('{"nl": "x"}', "must be strings"),
    ('{"nl": "", "code": "y"}', "nonempty"),
])
def test_malformed_lines_report_line_numbers(line, reason):
    good = '{"nl": "a", "code": "b;"}'
    with pytest.raises(FormatError) as info:
        parse_corpus_lines([good, "", good, line])
    assert info.value.line == 4 and reason in info.value.reason


def test_missing_corpus_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_corpus(tmp_path / "absent.jsonl")


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_is_deterministic():
    assert generate_synthetic(50, seed=7) == generate_synthetic(50, seed=7)
    assert generate_synthetic(50, seed=7) != generate_synthetic(50, seed=8)


def test_synthetic_code_strict_parses_and_has_dataflow():
    ex = generate_synthetic(1000, seed=0)
    graphs = [extract_graph(e.code) for e in ex]
    assert all(g is not None for g in graphs)
    with_flow = sum(1 for g in graphs if g.edges_of(Relation.CO) or g.edges_of(Relation.CA))
    assert with_flow >= 500
    assert all(e.nl and e.code for e in ex)


# ---------------------------------------------------------------------------
# config


def test_config_round_trip():
    spec = tiny_spec(variants=[Variant("g1", gin()), Variant("z", gin(lam=0.0, layers=3, warmup=0))])
    spec.variants[1].plan.mode = "causal"
    back = spec_from_config(spec_to_config(spec))
    assert back == spec


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        spec_from_config("[train]\nepochz = 3\n")
    with pytest.raises(ValueError):
        spec_from_config("[trian]\nepochs = 3\n")


def test_prepare_deduplicates_test_against_train():
    data = prepare(tiny_spec())
    train = {(e.nl, e.code) for e in data.train}
    assert not any((e.nl, e.code) in train for e in data.test)
    assert len(data.train_pairs) == len(data.train_items) == len(data.train)


# ---------------------------------------------------------------------------
# experiments


def test_baseline_only_table_has_no_fused_columns():
    res = run_experiment(tiny_spec(generate=False))
    lines = res.table.splitlines()
    assert len(lines) == 3 and lines[2].split()[0] == "baseline"
    assert "d_tf_bleu" not in lines[0] and "gen_bleu" not in lines[0]


def test_experiment_is_deterministic(tmp_path):
    spec = tiny_spec(variants=[Variant("g1", gin())])
    a = run_experiment(spec)
    spec.out_dir = str(tmp_path)
    b = run_experiment(spec)
    assert a.table == b.table
    assert (tmp_path / "results.txt").read_text() == a.table
    assert json.loads((tmp_path / "results.json").read_text())[1]["name"] == "g1"
    assert {p.name for p in tmp_path.glob("*.ckpt")} == {"baseline.ckpt", "g1.ckpt"}


def test_lambda_zero_variant_equals_baseline():
    res = run_experiment(tiny_spec(variants=[Variant("zero", gin(lam=0.0, warmup=2))]))
    base, zero = res.results
    assert zero.tf.summary() == base.tf.summary()
    assert zero.gen.summary() == base.gen.summary()


def test_parallel_workers_match_sequential():
    variants = [Variant("g1", gin()), Variant("g2", gin(layers=2))]
    seq = run_experiment(tiny_spec(generate=False, variants=variants))
    par = run_experiment(tiny_spec(generate=False, variants=variants, workers=2))
    assert seq.table == par.table


def test_variant_failures_carry_the_variant_name():
    bad = FusionPlan(1.0, gnn=GnnConfig("GIN", 1, 32))  # width differs from the PLM
    with pytest.raises(ExperimentError) as info:
        run_experiment(tiny_spec(generate=False, variants=[Variant("wide", bad)]))
    assert info.value.variant == "wide"


# ---------------------------------------------------------------------------
# command line


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "c.jsonl"
    save_corpus(path, generate_synthetic(12, seed=2))
    return path


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(spec_to_config(tiny_spec(dropout=0.0, variants=[Variant("g1", gin())])))
    return path


def test_cli_graph_extract(corpus, tmp_path, capsys):
    assert cli.main(["graph", "extract", str(corpus), "--out", str(tmp_path / "g")]) == 0
    lines = (tmp_path / "g" / "graphs.jsonl").read_text().splitlines()
    assert len(lines) == 12 and all(from_json(json.loads(x)).num_nodes for x in lines)
    src = tmp_path / "m.java"
    src.write_text(SAMPLE_CODE)
    assert cli.main(["graph", "extract", str(src)]) == 0
    g = from_json(json.loads(capsys.readouterr().out))
    assert len(g.terminal_nodes) == len(tokenize(SAMPLE_CODE))


def test_cli_tokenizer_train(corpus, tmp_path):
    assert cli.main(["tokenizer", "train", str(corpus), "--vocab-size", "300", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "vocab.txt").exists()


def test_cli_train_eval_generate(config, tmp_path, capsys):
    model = tmp_path / "m"
    assert cli.main(["train", "--config", str(config), "--variant", "g1", "--out", str(model)]) == 0
    assert {p.name for p in model.iterdir()} >= {"model.ckpt", "vocab.txt", "plan.json"}
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(model), "--config", str(config)]) == 0
    assert capsys.readouterr().out.splitlines()[2].split()[0] == "m"
    assert cli.main(["generate", "--model", str(model), "return the sum", "--max-steps", "5"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["generate", "--model", str(model), "return the sum", "--max-steps", "5"]) == 0
    assert capsys.readouterr().out == first


def test_cli_experiment_run_matches_library(config, tmp_path, capsys):
    assert cli.main(["experiment", "run", "--config", str(config), "--out", str(tmp_path / "x"),
                     "--no-generate"]) == 0
    out = capsys.readouterr().out
    spec = spec_from_config(config.read_text())
    spec.generate = False
    assert out == run_experiment(spec).table
    assert cli.main(["--seed", "5", "experiment", "run", "--config", str(config), "--no-generate"]) == 0
    assert capsys.readouterr().out != out


def test_cli_usage_errors(config, tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["fly"]) == 1
    assert cli.main(["train", "--epochs"]) == 1
    assert cli.main(["train", "--config", str(config), "--variant", "nope", "--out", str(tmp_path)]) == 1
    assert cli.main(["tokenizer", "train", "x.jsonl"]) in (1, 2)


def test_cli_data_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"nl": "a", "code": "b;"}\n{oops\n')
    assert cli.main(["tokenizer", "train", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["tokenizer", "train", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochz = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    src = tmp_path / "broken.java"
    src.write_text("x = = ;")
    assert cli.main(["graph", "extract", str(src)]) == 2
    assert cli.main(["eval", "--model", str(tmp_path / "nomodel")]) == 2


def test_cli_internal_errors(monkeypatch, corpus):
    def boom(args):
        raise AlignmentError("terminal without subtokens")

    monkeypatch.setattr(cli, "cmd_graph_extract", boom)
    assert cli.main(["graph", "extract", str(corpus)]) == 3
