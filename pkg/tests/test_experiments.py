from collections import OrderedDict
from unittest.mock import patch

import numpy as np
import pytest

from apps.adaptation.schemas import StrategyKind
from apps.adaptation.service import stage_corpus, stage_layout
from apps.corpus.schemas import Split
from apps.corpus.storage import read_corpus
from apps.decoding.schemas import CheckpointSet
from apps.experiments import service
from apps.experiments.checkpoints import (
    checkpoint_name,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_checkpoint_set,
    save_checkpoint_set,
)
from apps.experiments.config import build_plan, parse_config, parent_names
from apps.experiments.runs import RunLayout, load_run, read_trace, write_lines, write_manifest
from apps.experiments.schemas import ContextEntry, RunManifest
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig
from apps.model.service import init_params
from core.exceptions import CheckpointError, ConfigError, ContextError, DataError, PlanError

TINY_INI = """
[data]
dir = {data_dir}
seed = 3
in_domain = ind
region_size = 8
min_len = 3
max_len = 5

[corpus.ind]
src_lang = j
domain = med
reorder = swap_pairs
train = 12
dev = 3
test = 3

[corpus.ood]
src_lang = j
domain = news
train = 24
dev = 3
test = 3

[model]
d_model = 12
n_heads = 2
d_ff = 16
n_enc_layers = 1
n_dec_layers = 1
dropout = 0.0
max_len = 40

[training]
max_tokens = 64
eval_interval = 2
window = 1
max_batches = 4
warmup = 4
bpe_merges = 10
vocab_cap = 200
dev_limit = 3
eval_batch_size = 8
last_k = 2

[strategy]
kind = {kind}
head = {head}

[decoding]
beam = 2
max_len = 20
last_k = 2
"""


def tiny_config(data_dir, kind="mixed_fine_tuning", head="vanilla", extra=""):
    return parse_config(TINY_INI.format(data_dir=data_dir, kind=kind, head=head) + extra)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    config = tiny_config(root / "data")
    service.cmd_synth_data(config)
    return root, config


@pytest.fixture(scope="module")
def trained(workspace):
    root, config = workspace
    run_dir = root / "run"
    service.cmd_prepare(config, run_dir)
    manifest = service.cmd_train(config, run_dir)
    return run_dir, config, manifest


class TestConfigFile:
    def test_parses_sections(self, tmp_path):
        config = tiny_config(tmp_path)
        assert config.strategy.kind is StrategyKind.MIXED_FINE_TUNING
        assert config.corpora["ind"].train == 12
        assert config.model.d_model == 12
        assert parent_names(config) == ["ood"]

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, extra="\n[optimizer]\nlr = 1\n")

    def test_unknown_key(self, tmp_path):
        text = TINY_INI.format(data_dir=tmp_path, kind="concat", head="vanilla").replace("warmup = 4", "warmup_steps = 4")
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_strategy(self, tmp_path):
        text = TINY_INI.format(data_dir=tmp_path, kind="concat", head="vanilla").split("[strategy]")[0]
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_unknown_strategy(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, kind="back_translation")

    def test_proposed_needs_group_head(self, tmp_path):
        with pytest.raises(PlanError):
            tiny_config(tmp_path, kind="proposed")

    def test_indivisible_width(self, tmp_path):
        text = TINY_INI.format(data_dir=tmp_path, kind="concat", head="vanilla").replace("n_heads = 2", "n_heads = 5")
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_unknown_parent(self, tmp_path):
        text = TINY_INI.format(data_dir=tmp_path, kind="concat", head="vanilla").replace(
            "head = vanilla", "head = vanilla\nparents = ood, web"
        )
        with pytest.raises(PlanError):
            parse_config(text)

    def test_labels(self, tmp_path):
        assert tiny_config(tmp_path, kind="proposed_mft", head="domextr").strategy.label == "proposed_mft(domextr)"
        assert tiny_config(tmp_path).strategy.label == "mixed_fine_tuning"


class TestCheckpointFiles:
    def setup_method(self):
        self.config = ModelConfig(d_model=4, n_heads=2, d_ff=8, n_enc_layers=0, n_dec_layers=0, vocab_size=6)
        rng = np.random.default_rng(0)
        self.arrays = OrderedDict(
            [("embed", rng.normal(size=(6, 4)).astype(np.float32)), ("head.W_t", rng.normal(size=(4, 6)).astype(np.float32))]
        )

    def test_bytes_decode_to_same_checkpoint(self):
        checkpoint = decode_checkpoint(encode_checkpoint(42, self.config, self.arrays))
        assert checkpoint.step == 42
        assert checkpoint.config == self.config
        assert list(checkpoint.arrays) == ["embed", "head.W_t"]
        for name, array in self.arrays.items():
            np.testing.assert_array_equal(checkpoint.arrays[name], array)

    def test_flipped_byte(self):
        blob = bytearray(encode_checkpoint(1, self.config, self.arrays))
        blob[-3] ^= 0xFF
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(blob))

    def test_truncated(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(1, self.config, self.arrays)[:-8])

    def test_wrong_magic(self):
        blob = encode_checkpoint(1, self.config, self.arrays).replace(b"domadapt-checkpoint", b"other-checkpoint", 1)
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing.ckpt")

    def test_directory_of_checkpoints(self, tmp_path):
        checkpoints = CheckpointSet()
        for step in (2, 10, 4000):
            checkpoints.add(step, OrderedDict((k, v + step) for k, v in self.arrays.items()))
        save_checkpoint_set(tmp_path, self.config, checkpoints)
        assert (tmp_path / checkpoint_name(10)).name == "step-000010.ckpt"
        config, loaded = load_checkpoint_set(tmp_path)
        assert config == self.config
        assert loaded.steps == [2, 10, 4000]
        np.testing.assert_array_equal(loaded.snapshots[2]["embed"], self.arrays["embed"] + 4000)


class TestSynthData:
    def test_same_seed_gives_identical_files(self, workspace, tmp_path):
        root, config = workspace
        service.cmd_synth_data(config, out_dir=tmp_path / "again")
        originals = sorted(p.name for p in (root / "data").iterdir())
        assert originals == sorted(p.name for p in (tmp_path / "again").iterdir())
        for name in originals:
            assert (root / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_refuses_to_overwrite(self, workspace):
        _, config = workspace
        with pytest.raises(ConfigError):
            service.cmd_synth_data(config)

    def test_plan_from_files(self, workspace):
        _, config = workspace
        plan = build_plan(config, service.load_bundles(config))
        assert plan.child.name == "ind"
        assert [p.name for p in plan.parents] == ["ood"]
        assert len(plan.child.train) == 12


class TestPrepare:
    def test_second_prepare_is_a_no_op(self, workspace):
        root, config = workspace
        run_dir = root / "prepare-twice"
        assert service.cmd_prepare(config, run_dir)
        vocab_bytes = RunLayout.at(run_dir).vocab.read_bytes()
        assert not service.cmd_prepare(config, run_dir)
        assert RunLayout.at(run_dir).vocab.read_bytes() == vocab_bytes
        assert service.cmd_prepare(config, run_dir, force=True)

    def test_stage_data_written(self, workspace):
        root, config = workspace
        run_dir = root / "prepare-stages"
        service.cmd_prepare(config, run_dir)
        layout = RunLayout.at(run_dir)
        assert [p.name for p in layout.stage_data("parent").glob("*.tsv")] == ["parent.train.tsv"]
        assert [p.name for p in layout.stage_data("mixed").glob("*.tsv")] == ["mixed.train.tsv"]
        mixed = read_corpus(layout.stage_data("mixed"), "mixed", Split.TRAIN)
        assert any(src[0] == "2d1" for src in mixed.sources)

    def test_train_uses_prepared_stage_data(self, workspace):
        root, config = workspace
        run_dir = root / "prepare-then-train"
        service.cmd_prepare(config, run_dir)
        layout = RunLayout.at(run_dir)
        with patch.object(service, "run_strategy", wraps=service.run_strategy) as run:
            service.cmd_train(config, run_dir)
        stage_data = run.call_args.kwargs["stage_data"]
        assert [c.name for c in stage_data] == ["parent", "mixed"]
        assert stage_data[1] == read_corpus(layout.stage_data("mixed"), "mixed", Split.TRAIN)

    def test_prepared_data_matches_rebuilt_data(self, workspace):
        root, config = workspace
        run_dir = root / "prepare-compare"
        service.cmd_prepare(config, run_dir)
        layout = RunLayout.at(run_dir)
        plan = build_plan(config, service.load_bundles(config), config.training.seed)
        lexicons = service.read_lexicons(layout, plan)
        for index, stage in enumerate(stage_layout(plan)):
            rebuilt = stage_corpus(plan, stage, lexicons[index], plan.seed + index)
            assert read_corpus(layout.stage_data(stage.name), stage.name, Split.TRAIN) == rebuilt

    def test_train_fails_without_stage_data(self, workspace):
        root, config = workspace
        run_dir = root / "prepare-then-lose"
        service.cmd_prepare(config, run_dir)
        for path in RunLayout.at(run_dir).stage_data("mixed").iterdir():
            path.unlink()
        with pytest.raises(DataError):
            service.cmd_train(config, run_dir)

    def test_train_needs_prepare(self, workspace):
        root, config = workspace
        with pytest.raises(DataError):
            service.cmd_train(config, root / "never-prepared")

    def test_missing_corpora(self, tmp_path):
        config = tiny_config(tmp_path / "empty")
        with pytest.raises(DataError):
            service.cmd_prepare(config, tmp_path / "run")


class TestTrainedRun:
    def test_manifest_and_traces(self, trained):
        run_dir, _, manifest = trained
        layout = RunLayout.at(run_dir)
        assert [s.name for s in manifest.stages] == ["parent", "mixed"]
        assert manifest.contexts["ind"].tag_prefix == ("2d1",)
        assert layout.final.is_file()
        for stage in manifest.stages:
            rows = read_trace(layout.trace(stage.name))
            assert [row.step for row in rows] == stage.steps

    def test_translate_test_sets_and_evaluate(self, trained):
        run_dir, config, _ = trained
        written = service.cmd_translate(config, run_dir)
        assert sorted(p.name for p in written) == ["ind.hyp", "ood.hyp"]
        layout = RunLayout.at(run_dir)
        assert len(layout.hypothesis_file("ind").read_text().splitlines()) == 3
        assert service.cmd_evaluate(layout.hypothesis_file("ind"), layout.reference_file("ind")).startswith("BLEU = ")

    def test_translate_file_for_one_corpus(self, trained, tmp_path):
        run_dir, config, _ = trained
        source = tmp_path / "input.txt"
        bundles = service.load_bundles(config)
        write_lines(source, bundles["ind"].test.sources[:2])
        [target] = service.cmd_translate(config, run_dir, input_file=source, corpus="ind")
        assert len(target.read_text(encoding="utf-8").splitlines()) == 2

    def test_tagged_run_needs_corpus(self, trained):
        run_dir, _, _ = trained
        run = load_run(run_dir)
        with pytest.raises(ContextError):
            run.translate([("j1", "j2")])
        with pytest.raises(ContextError):
            run.translate([("j1", "j2")], corpus="web")

    def test_adapt_from_parent_checkpoint(self, trained, workspace):
        run_dir, config, manifest = trained
        root, _ = workspace
        parent_step = manifest.stages[0].steps[-1]
        parent = RunLayout.at(run_dir).checkpoints("parent") / checkpoint_name(parent_step)
        adapted_dir = root / "adapted"
        service.cmd_prepare(config, adapted_dir)
        adapted = service.cmd_adapt(config, parent, adapted_dir)
        assert [s.name for s in adapted.stages] == ["mixed"]

    def test_adapt_rejects_other_model(self, trained, workspace, tmp_path):
        run_dir, config, _ = trained
        root, _ = workspace
        checkpoint = tmp_path / "small.ckpt"
        other = ModelConfig(d_model=4, n_heads=2, d_ff=8, n_enc_layers=0, n_dec_layers=0, vocab_size=6)
        checkpoint.write_bytes(encode_checkpoint(1, other, init_params(other).snapshot()))
        adapted_dir = root / "mismatch"
        service.cmd_prepare(config, adapted_dir)
        with pytest.raises(ConfigError):
            service.cmd_adapt(config, checkpoint, adapted_dir)


def fake_run(root, label, kind, head, hyps, refs):
    layout = RunLayout.at(root)
    write_manifest(
        layout,
        RunManifest(
            strategy=kind,
            head=head,
            label=label,
            seed=1,
            in_domain="ind",
            config_hash="0" * 64,
            vocab="prepared/vocab.txt",
            contexts={"ind": ContextEntry(group=1), "ood": ContextEntry(group=2)},
        ),
    )
    for name in ("ind", "ood"):
        write_lines(layout.hypothesis_file(name), [line.split() for line in hyps[name]])
        write_lines(layout.reference_file(name), [line.split() for line in refs[name]])
    return root


class TestReport:
    REFS = {"ind": ["a b c d e"], "ood": ["p q r s t"]}

    def test_mean_over_runs_and_order(self, tmp_path):
        exact = dict(self.REFS)
        wrong = {"ind": ["a b c d e"], "ood": ["v w x y z"]}
        runs = [
            fake_run(tmp_path / "mft1", "mixed_fine_tuning", StrategyKind.MIXED_FINE_TUNING, HeadKind.VANILLA, exact, self.REFS),
            fake_run(tmp_path / "mft2", "mixed_fine_tuning", StrategyKind.MIXED_FINE_TUNING, HeadKind.VANILLA, wrong, self.REFS),
            fake_run(tmp_path / "ind1", "in_domain_only", StrategyKind.IN_DOMAIN_ONLY, HeadKind.VANILLA, exact, self.REFS),
        ]
        report = service.cmd_report(runs, tmp_path / "report.tsv")
        lines = report.splitlines()
        assert lines[0] == "strategy\ttest_set\tscope\tbleu\truns"
        assert lines[1:] == [
            "in_domain_only\tind\tin\t100.00\t1",
            "in_domain_only\tood\tout\t100.00\t1",
            "mixed_fine_tuning\tind\tin\t100.00\t2",
            "mixed_fine_tuning\tood\tout\t50.00\t2",
        ]
        assert (tmp_path / "report.tsv").read_text(encoding="utf-8") == report

    def test_no_runs(self):
        with pytest.raises(DataError):
            service.cmd_report([])

    def test_not_a_run(self, tmp_path):
        with pytest.raises(DataError):
            service.cmd_report([tmp_path])


class TestEvaluate:
    def test_identical_files(self, tmp_path):
        write_lines(tmp_path / "hyp", [("a", "b", "c", "d")])
        write_lines(tmp_path / "ref", [("a", "b", "c", "d")])
        assert service.cmd_evaluate(tmp_path / "hyp", tmp_path / "ref") == "BLEU = 100.00"

    def test_line_mismatch(self, tmp_path):
        write_lines(tmp_path / "hyp", [("a",), ("b",)])
        write_lines(tmp_path / "ref", [("a",)])
        with pytest.raises(DataError):
            service.cmd_evaluate(tmp_path / "hyp", tmp_path / "ref")
