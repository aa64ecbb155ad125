import json
import random

import pytest

from proctrain import report as rp
from proctrain import store as st
from proctrain.experiments import (ConfigError, ExperimentConfig, FinetuneJob, PretrainJob, Runner,
                                   embedding_policy, plan_components, plan_fig2, plan_table1,
                                   plan_table7, replication_plan, transfer_plan)
from proctrain.training import RunRecord


def rec(label, task, seed, acc):
    return RunRecord(run_id=f"{label}-{task}-{seed}", label=label, task=task, seed=seed,
                     model_digest="m", final_accuracy=acc)


class TestExperimentConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            ExperimentConfig.from_dict({"finetune_task": "sorting", "bogus": 1})

    def test_bad_sections(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"model": {"d_model": 10, "n_heads": 4}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"transfer_plan": {"Q": "x"}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"not_a_field": 1}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seeds": []})

    def test_load_and_digest(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"finetune_task": "sorting", "seeds": [0, 1],
                                    "transfer_plan": {"A": "identity"}}))
        cfg = ExperimentConfig.load(path)
        assert cfg.seeds == [0, 1]
        assert cfg.digest() == ExperimentConfig.load(path).digest()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(path)


class TestPlans:
    def test_embedding_policy(self):
        assert embedding_policy("identity", "sorting") == "copy"
        assert embedding_policy("set", "sorting") == "copy"
        assert embedding_policy("dyck-4", "haystack") == "average_reset"
        assert embedding_policy("identity", "haystack") == "average_reset"

    def test_transfer_plan_kinds(self):
        assert transfer_plan("attn", "identity", "haystack", 2).transferred_groups == ("A",)
        assert transfer_plan("full", "identity", "sorting", 2).embedding_policy == "copy"

    def test_fig2_covers_seven_donors_and_four_tasks(self):
        plan = plan_fig2("desk")
        assert len(plan.pretrain) == 7
        cells = {(j.label, j.task) for j in plan.finetune}
        assert len({t for _, t in cells}) == 4
        assert len(cells) == 4 * (7 + 1)
        assert len(plan.finetune) == 3 * len(cells)

    def test_table1_composition_arm(self):
        plan = plan_table1("desk")
        assert {j.task for j in plan.pretrain} == {"set", "eca"}
        composed = [j for j in plan.finetune if j.label == "set/attn+eca/mlp"]
        assert len(composed) == 4 * 3
        p = composed[0].plan
        assert (p.E, p.A, p.F) == ("fresh", "set", "eca")

    def test_table7_noise_ladder(self):
        plan = plan_table7("desk", tasks=("haystack",))
        labels = {j.label for j in plan.finetune}
        assert {"identity/attn/pretrained", "identity/attn/shuffled", "identity/attn/noise0.01",
                "identity/attn/noise0.05", "identity/attn/noise0.1", "random"} == labels

    def test_components_three_kinds(self):
        plan = plan_components("desk", seeds=(0,), tasks=("sorting",))
        assert len(plan.finetune) == 1 + 6 * 3

    def test_keys_distinguish_jobs(self):
        plan = plan_fig2("desk")
        keys = [j.key() for j in plan.finetune]
        assert len(set(keys)) == len(keys)

    def test_dry_run_describes_without_training(self):
        text = replication_plan("table1", "desk").describe()
        assert text.startswith("plan table1: 2 pretraining")
        assert "set/attn+eca/mlp" in text

    def test_unknown_table_and_scale(self):
        with pytest.raises(ConfigError):
            replication_plan("table9")
        with pytest.raises(ConfigError):
            replication_plan("fig2", "huge")


class TestRunner:
    def test_caches_donors_and_records(self, tmp_path):
        small = (("max_steps", 3), ("eval_interval", 3), ("eval_episodes", 8), ("batch_size", 4))
        donor = PretrainJob("identity", overrides=small)
        job = FinetuneJob("identity/attn", "sorting", 0,
                          transfer_plan("attn", "identity", "sorting", 0), (donor,), overrides=small)
        store = st.Store(tmp_path)
        first = Runner(store).finetune(job)
        again = Runner(st.Store(tmp_path))
        assert again.store.ref(f"pretrain/{donor.key()}") is not None
        assert again.finetune(job).to_json() == first.to_json()
        lines = (tmp_path / "records.ndjson").read_text().splitlines()
        assert len(lines) == 2  # one pretraining, one fine-tuning record


class TestReport:
    RECORDS = [rec("random", "haystack", s, a) for s, a in enumerate([0.10, 0.12, 0.11])] + \
        [rec("identity/attn/pretrained", "haystack", s, a) for s, a in enumerate([0.9, 0.95, 1.0])] + \
        [rec("identity/attn/shuffled", "haystack", s, a) for s, a in enumerate([0.2, 0.1, 0.15])] + \
        [rec("pretrain/identity", "identity", 0, 0.99)]

    def test_two_seeds_one_row(self):
        summary = rp.summarize([rec("a", "t", 0, 0.1), rec("a", "t", 1, 0.3)])
        (n, mean, std), = summary.values()
        assert n == 2 and mean == pytest.approx(0.2) and std == pytest.approx(0.1414213, abs=1e-6)

    def test_pretraining_rows_skipped(self):
        assert ("pretrain/identity", "identity") not in rp.summarize(self.RECORDS)

    def test_rerun_same_seed_counts_once(self):
        summary = rp.summarize([rec("a", "t", 0, 0.1), rec("a", "t", 0, 0.1)])
        assert summary[("a", "t")][0] == 1

    def test_relative_scores(self):
        scores = rp.relative_scores(rp.summarize(self.RECORDS))
        assert scores[("identity/attn/shuffled", "haystack")] == pytest.approx((0.15 - 0.11) / (0.95 - 0.11))
        assert ("identity/attn/pretrained", "haystack") not in scores

    def test_csv_round_trip(self):
        summary = rp.summarize(self.RECORDS)
        text = rp.to_csv(summary)
        back = rp.read_csv(text)
        assert set(back) == set(summary)
        for key, (n, mean, std) in back.items():
            assert n == summary[key][0]
            assert f"{mean:.6f}" == f"{summary[key][1]:.6f}" and f"{std:.6f}" == f"{summary[key][2]:.6f}"
        assert rp.to_csv(back) == text

    def test_order_independent(self):
        shuffled = list(self.RECORDS)
        random.Random(0).shuffle(shuffled)
        a, b = rp.summarize(self.RECORDS), rp.summarize(shuffled)
        assert rp.to_csv(a, rp.relative_scores(a)) == rp.to_csv(b, rp.relative_scores(b))
        assert rp.to_text(a) == rp.to_text(b)

    def test_text_lists_random_first(self):
        text = rp.to_text(rp.summarize(self.RECORDS))
        body = text.splitlines()[3:]
        assert body[0].startswith("random")

    def test_empty_glob(self, tmp_path):
        with pytest.raises(rp.EmptyReportError):
            rp.load_records(str(tmp_path / "*.ndjson"))
