import json
import pkgutil
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import fhmm
from fhmm import cli
from fhmm.dp import viterbi_align
from fhmm.io import read_alignment, read_checkpoint, read_features, write_alignment
from fhmm.labels import read_lexicon, read_phonemes, word_seq_to_segments
from fhmm.model import FactoredScorer, Priors, TrainingError
from fhmm.pipeline.common import load_scorer, read_tsv
from fhmm.pipeline.config import ConfigError, load_config
from fhmm.pipeline.decode import read_hyps
from fhmm.pipeline.synth import load_generator
from fhmm.pipeline.tune import rescore
from fhmm.decoder import Lattice
from fhmm.topology import TdpModel, build_alignment_fsa

SMALL = {
    "synth": {"num_train": 40, "num_dev": 6, "num_test": 6, "num_words": 12, "feature_dim": 8},
    "model": {"hidden": 16, "layers": 2, "embed": 8},
    "fullsum": {"epochs": 5, "batch_utts": 4},
    "viterbi": {"epochs": 3, "batch_chunks": 8},
    "decode": {"beam_limit": 64},
    "tune": {"prior_scales": [0.0, 0.3], "tdp_scales": [1.0], "silence_exits": [0.0], "lm_scales": [1.0, 3.0]},
}


def write_config(dir_: Path, extra: dict | None = None) -> Path:
    cfg = json.loads(json.dumps(SMALL))
    for section, values in (extra or {}).items():
        cfg.setdefault(section, {}).update(values)
    cfg["paths"] = {"work_dir": "work"}
    path = dir_ / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run(config: Path, command: str, *overrides: str) -> int:
    return cli.main([command, "--config", str(config), "-q", *overrides])


def run_ok(config: Path, *commands: str, overrides=()) -> None:
    for c in commands:
        assert run(config, c, *overrides) == 0, c


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Small corpus taken through full-sum, alignment, Viterbi training and priors."""
    d = tmp_path_factory.mktemp("pipe")
    config = write_config(d)
    run_ok(config, "synth", "train-fullsum", "align", "train-viterbi", "estimate-priors")
    return d


@pytest.fixture
def workdir(trained, tmp_path):
    """A private copy of the trained pipeline directory."""
    dst = tmp_path / "pipe"
    shutil.copytree(trained, dst)
    return dst


def files_of(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# configuration and CLI ------------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None, ["viterbi.epochs=7", "decode.set=dev", "tune.lm_scales=[1,2]"])
    assert cfg["viterbi"]["epochs"] == 7 and cfg["decode"]["set"] == "dev" and cfg["tune"]["lm_scales"] == [1, 2]
    assert Path(cfg["paths"]["lexicon"]).name == "lexicon.txt"
    for bad in (["nosuch.key=1"], ["viterbi.epochs=two"], ["viterbi"], ["model.order=quad"], ["tune.lm_scales=[]"]):
        with pytest.raises(ConfigError):
            load_config(None, bad)
    path = tmp_path / "c.json"
    path.write_text('{"fullsum": {"epochs": 2}, "paths": {"work_dir": "w"}}')
    cfg = load_config(path)
    assert cfg["fullsum"]["epochs"] == 2 and cfg["paths"]["work_dir"] == str((tmp_path / "w").resolve())
    path.write_text('{"fullsum": {"bogus": 1}}')
    with pytest.raises(ConfigError):
        load_config(path)


def test_cli_exit_codes(tmp_path):
    config = write_config(tmp_path)
    assert run(config, "train-fullsum") == 1  # corpus missing: validation error
    assert run(config, "synth", "synth.num_words=100000") == 1
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["synth", "--config", str(tmp_path / "broken.json")]) == 1
    out = subprocess.run(
        [sys.executable, "-m", "fhmm.cli", "wer", "--config", str(config)], capture_output=True, text=True
    )
    assert out.returncode == 1
    assert "event=error" in out.stderr and "kind=validation" in out.stderr


def test_runtime_error_exit_code_keeps_checkpoint(workdir, monkeypatch):
    from fhmm.pipeline import train

    def boom(*a, **k):
        raise TrainingError("non-finite loss")

    monkeypatch.setattr(train, "train_step", boom)
    config = workdir / "config.json"
    assert run(config, "train-viterbi", "viterbi.out=diverged") == 2
    # the last good state (here: the initialization) is on disk
    assert (workdir / "work" / "diverged" / "last.ckpt").exists()


def test_no_gmm_or_tying_tree_modules():
    names = [m.name for m in pkgutil.walk_packages(fhmm.__path__, "fhmm.")]
    assert names and not [n for n in names if any(k in n.lower() for k in ("gmm", "mixture", "cart", "tree_tying"))]


# synth ----------------------------------------------------------------------------


def test_synth_deterministic_and_complete(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        run_ok(write_config(d, {"synth": {"num_train": 50}}), "synth")
    fa, fb = files_of(a / "work"), files_of(b / "work")
    assert fa == fb
    corpus = a / "work" / "corpus"
    train = json.loads((corpus / "train.json").read_text())
    assert len(train) == 50 and len(list((corpus / "feats").glob("train-*.feat"))) == 50
    # a different seed gives a different corpus
    c = tmp_path / "c"
    c.mkdir()
    run_ok(write_config(c, {"synth": {"seed": 2}}), "synth")
    assert files_of(c / "work") != fa


def test_synth_alignments_are_valid_paths(trained):
    corpus = trained / "work" / "corpus"
    inv = read_phonemes(corpus / "phonemes.txt")
    lex = read_lexicon(corpus / "lexicon.txt", inv)
    for utt, feats, text in json.loads((corpus / "train.json").read_text()):
        labels, digest = read_alignment(corpus / "gold" / f"{utt}.algn")
        assert digest == inv.digest()
        assert len(labels) == len(read_features(corpus / feats))
        fsa = build_alignment_fsa(word_seq_to_segments(text.split(), lex), True, inventory=inv)
        em = np.full((len(labels), inv.num_allophones), -np.inf)
        em[np.arange(len(labels)), labels] = 0.0
        al = viterbi_align(fsa, em, TdpModel(0.0, 0.0, 0.0, 0.0))
        assert np.isfinite(al.score)  # the generating labels form an accepted path


def test_oracle_emissions_reproduce_generating_alignment(tmp_path):
    config = write_config(tmp_path, {"synth": {"noise": 0.05, "num_train": 20}})
    run_ok(config, "synth")
    corpus = tmp_path / "work" / "corpus"
    inv = read_phonemes(corpus / "phonemes.txt")
    lex = read_lexicon(corpus / "lexicon.txt", inv)
    gen = load_generator(corpus)
    for utt, feats, text in json.loads((corpus / "train.json").read_text()):
        x = read_features(corpus / feats)
        gold, _ = read_alignment(corpus / "gold" / f"{utt}.algn")
        fsa = build_alignment_fsa(word_seq_to_segments(text.split(), lex), True, inventory=inv)
        al = viterbi_align(fsa, gen.log_likelihoods(x, inv), TdpModel())
        assert [inv.allophone_index(s) for s in al.frame_labels] == gold.tolist()


# training -------------------------------------------------------------------------


def test_fullsum_loss_decreases(trained):
    rows = read_tsv(trained / "work" / "fullsum" / "loss.tsv")
    losses = [float(r["total"]) for r in rows[:5]]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert (trained / "work" / "fullsum" / "loss.png").stat().st_size > 0


def test_fullsum_zero_epochs_is_initialization(workdir):
    config = workdir / "config.json"
    run_ok(config, "train-fullsum", overrides=["fullsum.epochs=0", "fullsum.out=fs0"])
    scorer, meta, tensors = load_scorer(workdir / "work" / "fs0" / "last.ckpt")
    init = FactoredScorer(scorer.config, seed=0)
    for k in scorer.trainable():
        np.testing.assert_array_equal(scorer.params[k], init.params[k])
    assert meta["epoch"] == 0 and meta["steps"] == 0


def test_fullsum_resume_reproduces_trajectory(workdir):
    config = workdir / "config.json"
    full = workdir / "work" / "fullsum"
    part = workdir / "work" / "fs_resume"
    part.mkdir()
    shutil.copy(full / "epoch-002.ckpt", part / "last.ckpt")
    shutil.copy(full / "loss.tsv", part / "loss.tsv")
    run_ok(config, "train-fullsum", overrides=["fullsum.out=fs_resume", "fullsum.resume=true"])
    assert (part / "last.ckpt").read_bytes() == (full / "last.ckpt").read_bytes()
    assert (part / "loss.tsv").read_text() == (full / "loss.tsv").read_text()


def test_viterbi_training_outputs(trained):
    work = trained / "work"
    rows = read_tsv(work / "viterbi" / "loss.tsv")
    assert float(rows[-1]["total"]) < float(rows[0]["total"])
    _, meta = read_checkpoint(work / "viterbi" / "last.ckpt")
    assert meta["kind"] == "viterbi" and meta["scorer"]["order"] == "di"
    priors = Priors.load(work / "priors.json")
    np.testing.assert_allclose(priors.p_center_given_left.sum(1), 1.0, atol=1e-8)


def test_aux_weight_zero_matches_main_only(workdir):
    config = workdir / "config.json"
    run_ok(config, "train-viterbi", overrides=["viterbi.out=plain"])
    run_ok(config, "train-viterbi", overrides=["viterbi.out=aux0", "model.aux_layers=[1,2]", "viterbi.aux_weight=0"])
    plain, _ = read_checkpoint(workdir / "work" / "plain" / "last.ckpt")
    aux, _ = read_checkpoint(workdir / "work" / "aux0" / "last.ckpt")
    shared = [k for k in plain if k.startswith("model/")]
    assert any(k.startswith("model/aux") for k in aux)
    for k in shared:
        np.testing.assert_array_equal(plain[k], aux[k], err_msg=k)
    a = read_tsv(workdir / "work" / "plain" / "loss.tsv")
    b = read_tsv(workdir / "work" / "aux0" / "loss.tsv")
    assert [r["main"] for r in a] == [r["main"] for r in b]


def test_triphone_from_monophone_alignment(workdir):
    config = workdir / "config.json"
    run_ok(config, "train-viterbi", overrides=["viterbi.out=tri", "model.order=tri", "model.multitask=true"])
    _, meta = read_checkpoint(workdir / "work" / "tri" / "last.ckpt")
    assert meta["scorer"]["order"] == "tri"


def test_inventory_hash_mismatch_is_rejected(workdir):
    config = workdir / "config.json"
    align_dir = workdir / "work" / "align" / "train"
    victim = sorted(align_dir.glob("*.algn"))[0]
    labels, digest = read_alignment(victim)
    write_alignment(victim, labels, digest ^ 1)
    assert run(config, "train-viterbi", "viterbi.out=bad") == 1
    assert not (workdir / "work" / "bad" / "last.ckpt").exists()


# alignment -------------------------------------------------------------------------


def test_alignment_cache_matches_corpus(trained):
    work = trained / "work"
    manifest = json.loads((work / "align" / "manifest.json").read_text())
    entry = manifest["sets"]["train"]
    corpus = json.loads((work / "corpus" / "train.json").read_text())
    assert len(entry["files"]) == len(corpus) and entry["skipped"] == []
    for utt, feats, _ in corpus:
        labels, _ = read_alignment(work / "align" / entry["files"][utt])
        assert len(labels) == len(read_features(work / "corpus" / feats))


def test_alignment_skips_impossible_utterance(workdir):
    corpus = workdir / "work" / "corpus"
    train = json.loads((corpus / "train.json").read_text())
    words = json.loads((corpus / "dev.json").read_text())[0][2].split()[:1]
    train[0][2] = " ".join(words * 60)  # far more segments than frames
    (corpus / "bad.json").write_text(json.dumps(train))
    config = workdir / "config.json"
    run_ok(config, "align", overrides=[f"paths.train={corpus / 'bad.json'}", "align.out=align_bad"])
    entry = json.loads((workdir / "work" / "align_bad" / "manifest.json").read_text())["sets"]["train"]
    assert [s["utt_id"] for s in entry["skipped"]] == [train[0][0]]
    assert len(entry["files"]) == len(train) - 1


def test_align_parallel_matches_serial(workdir):
    config = workdir / "config.json"
    run_ok(config, "align", overrides=["align.out=align_par", "align.workers=2"])
    a = files_of(workdir / "work" / "align")
    b = files_of(workdir / "work" / "align_par")
    assert a == b


# tuning and decoding ----------------------------------------------------------------


def test_tune_report_and_rescoring(workdir):
    config = workdir / "config.json"
    run_ok(config, "tune")
    out = workdir / "work" / "tune"
    best = json.loads((out / "best.json").read_text())
    stage1 = read_tsv(out / "stage1.tsv")
    assert len(stage1) == 2 and best["num_decodes"] == 3 and best["num_rescores"] == 2
    chosen = [r for r in stage1 if float(r["prior_scale"]) == best["prior_scale"]][0]
    assert all(float(chosen["wer"]) <= float(r["wer"]) for r in stage1)
    stage2 = read_tsv(out / "stage2.tsv")
    assert float(best["dev_wer"]) == min(float(r["wer"]) for r in stage2)
    # rescoring the saved lattices reproduces stage 2 exactly
    from fhmm.pipeline.decode import score
    from fhmm.pipeline.corpus import Resources

    utts = Resources(load_config(config)).corpus("dev")
    lattices = {p.stem: Lattice.load(p) for p in sorted((out / "lattices").glob("*.lat"))}
    for row in stage2:
        report, _ = score(utts, rescore(lattices, float(row["lm_scale"])))
        assert repr(report.wer) == row["wer"]
    assert (out / "tuning.png").stat().st_size > 0


def test_tune_singleton_grid(workdir):
    config = workdir / "config.json"
    run_ok(
        config,
        "tune",
        overrides=["tune.prior_scales=[0.3]", "tune.lm_scales=[2.0]", "tune.out=tune1"],
    )
    best = json.loads((workdir / "work" / "tune1" / "best.json").read_text())
    assert (best["num_decodes"], best["num_rescores"]) == (1, 1)
    assert (best["prior_scale"], best["tdp_scale"], best["silence_exit"], best["lm_scale"]) == (0.3, 1.0, 0.0, 2.0)
    assert read_tsv(workdir / "work" / "tune1" / "stage1.tsv") == []


def test_tune_empty_grid_is_validation_error(workdir):
    assert run(workdir / "config.json", "tune", "tune.tdp_scales=[]") == 1


def test_decode_deterministic_and_parallel(workdir):
    config = workdir / "config.json"
    run_ok(config, "decode", "wer", overrides=["decode.use_tuned=false"])
    run_ok(config, "decode", overrides=["decode.use_tuned=false", "decode.out=decode2", "decode.workers=2"])
    a = workdir / "work" / "decode" / "test"
    b = workdir / "work" / "decode2" / "test"
    assert (a / "hyps.txt").read_bytes() == (b / "hyps.txt").read_bytes()
    assert files_of(a / "lattices") == files_of(b / "lattices")
    ids = [ln.split("\t")[0] for ln in (a / "hyps.txt").read_text().splitlines()]
    assert ids == sorted(ids)
    report = json.loads((a / "wer.json").read_text())
    assert {"substitutions", "deletions", "insertions", "ref_words", "wer"} <= set(report)
    # the lattice first-best at the decoding LM scale is the decoder output
    settings = json.loads((a / "settings.json").read_text())
    hyps = read_hyps(a / "hyps.txt")
    for p in sorted((a / "lattices").glob("*.lat")):
        assert rescore({p.stem: Lattice.load(p)}, settings["lm_scale"])[p.stem] == hyps[p.stem]


def test_decode_search_failure_counts_as_deletions(workdir, monkeypatch):
    from fhmm.decoder import SearchError
    from fhmm.pipeline import decode as decode_mod

    real = decode_mod.beam_search
    calls = []

    def flaky(*a, **k):
        calls.append(1)
        if len(calls) == 1:
            raise SearchError("pruned away")
        return real(*a, **k)

    monkeypatch.setattr(decode_mod, "beam_search", flaky)
    config = workdir / "config.json"
    run_ok(config, "decode", "wer", overrides=["decode.use_tuned=false"])
    out = workdir / "work" / "decode" / "test"
    failed = (out / "failures.txt").read_text().split()
    assert len(failed) == 1
    assert read_hyps(out / "hyps.txt")[failed[0]] == []
    rows = {r["utt_id"]: r for r in read_tsv(out / "wer_utts.tsv")}
    assert rows[failed[0]]["del"] == rows[failed[0]]["ref_words"]


def test_wer_missing_hypotheses_are_deletions(workdir):
    config = workdir / "config.json"
    run_ok(config, "decode", overrides=["decode.use_tuned=false"])
    hyp_file = workdir / "work" / "decode" / "test" / "hyps.txt"
    lines = hyp_file.read_text().splitlines()
    partial = workdir / "partial.txt"
    partial.write_text("\n".join(lines[1:]) + "\n")
    run_ok(config, "wer", overrides=[f"wer.hyps={partial}"])
    report = json.loads((workdir / "wer.json").read_text())
    assert report["missing"] == 1
    n_ref = len(json.loads((workdir / "work" / "corpus" / "test.json").read_text())[0][2].split())
    assert report["deletions"] >= n_ref


@pytest.mark.slow
def test_training_set_decodes_better_than_held_out(tmp_path):
    # noisy enough that held-out WER is not zero (see docs/pilot.md)
    config = write_config(tmp_path)
    config.write_text(json.dumps({"paths": {"work_dir": "work"}, "synth": {"noise": 1.6}}))
    run_ok(config, "synth", "train-fullsum", "align", "train-viterbi", "estimate-priors", "tune", "decode", "wer")
    run_ok(config, "decode", "wer", overrides=["decode.set=train", "wer.set=train"])
    out = tmp_path / "work" / "decode"
    test = json.loads((out / "test" / "wer.json").read_text())["wer"]
    train = json.loads((out / "train" / "wer.json").read_text())["wer"]
    assert train < test
