import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proctrain import diagnostics as dg


def digits_to_int(ds):
    return int("".join(map(str, ds)))


def answer_mask_after_separator(ep, sep):
    """Mask is true exactly on the answer tokens and never before ``sep``."""
    n_in = len(ep.input_tokens)
    return (ep.input_tokens[-1] == sep and not ep.loss_mask[:n_in].any()
            and ep.loss_mask[n_in:].all() and len(ep.loss_mask) == n_in + len(ep.target_tokens))


class TestDefaults:
    def test_task_defaults(self):
        assert dg.TASK_DEFAULTS["haystack"] == {"k_pairs": 30}
        assert dg.TASK_DEFAULTS["addition"] == {"n_digits": 5}
        assert dg.TASK_DEFAULTS["reversed_addition"] == {"n_digits": 10}
        assert dg.TASK_DEFAULTS["multiplication"] == {"n_digits": 5}
        assert dg.TASK_DEFAULTS["sorting"] == {"n": 10, "P": 100}
        assert dg.TASK_DEFAULTS["language_modelling"] == {"seq_len": 64, "vocab_size": 2000}

    def test_vocab_ids_injective(self):
        for vm in (dg.ARITH_VOCAB_MAP, dg.sorting_vocab(100)):
            ids = list(vm.symbols.values())
            assert len(set(ids)) == len(ids) and max(ids) < vm.size
        assert (dg.PLUS, dg.TIMES, dg.EQUALS, dg.ARITH_PAD) == (10, 11, 12, 13)


class TestHaystack:
    def test_ten_thousand_against_lookup_table(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            ep = dg.gen_haystack(30, rng)
            seq = ep.input_tokens.tolist()
            table = dict(zip(seq[0:-1:2], seq[1:-1:2]))
            assert len(table) == 30  # markers distinct
            assert all(m >= dg.HAYSTACK_VALUES for m in table)
            assert all(v < dg.HAYSTACK_VALUES for v in table.values())
            assert ep.target_tokens.tolist() == [table[seq[-1]]]

    def test_single_pair(self):
        ep = dg.gen_haystack(1, np.random.default_rng(1))
        assert ep.target_tokens[0] == ep.input_tokens[1]
        assert ep.input_tokens[0] == ep.input_tokens[2]

    def test_only_answer_supervised(self):
        ep = dg.gen_haystack(5, np.random.default_rng(2))
        assert ep.loss_mask.sum() == 1 and ep.loss_mask[-1]

    def test_query_is_uniform(self):
        rng = np.random.default_rng(3)
        slots = [ep.input_tokens[:-1:2].tolist().index(ep.input_tokens[-1])
                 for ep in (dg.gen_haystack(4, rng) for _ in range(4000))]
        counts = np.bincount(slots, minlength=4)
        assert counts.min() > 900

    def test_too_many_pairs(self):
        with pytest.raises(ValueError):
            dg.gen_haystack(51, np.random.default_rng(0))
        with pytest.raises(ValueError):
            dg.gen_haystack(0, np.random.default_rng(0))


class TestAddition:
    def test_forward_example(self):
        ep = dg.gen_addition(5, False, None, operands=(12345, 1))
        assert ep.input_tokens.tolist() == [1, 2, 3, 4, 5, dg.PLUS, 0, 0, 0, 0, 1, dg.EQUALS]
        assert ep.target_tokens.tolist() == [0, 1, 2, 3, 4, 6]

    def test_reversed_toy_schema(self):
        # ab + cd = efg is written b a + d c = g f e
        ep = dg.gen_addition(2, True, None, operands=(12, 34))
        assert ep.input_tokens.tolist() == [2, 1, dg.PLUS, 4, 3, dg.EQUALS]
        assert ep.target_tokens.tolist() == [6, 4, 0]

    def test_zero(self):
        ep = dg.gen_addition(3, False, None, operands=(0, 0))
        assert ep.target_tokens.tolist() == [0, 0, 0, 0]

    @pytest.mark.parametrize("rev", [False, True])
    def test_ten_thousand_against_integer_oracle(self, rev):
        rng = np.random.default_rng(4)
        n = 10 if rev else 5
        for _ in range(10_000):
            ep = dg.gen_addition(n, rev, rng)
            inp = ep.input_tokens.tolist()
            a, b = inp[:n], inp[n + 1: 2 * n + 1]
            out = ep.target_tokens.tolist()
            if rev:
                a, b, out = a[::-1], b[::-1], out[::-1]
            assert len(out) == n + 1
            assert digits_to_int(out) == digits_to_int(a) + digits_to_int(b)
            assert answer_mask_after_separator(ep, dg.EQUALS)


class TestMultiplication:
    def test_examples(self):
        assert dg.gen_multiplication(5, None, operands=(1, 1)).target_tokens.tolist() == [0] * 9 + [1]
        assert not dg.gen_multiplication(5, None, operands=(0, 98765)).target_tokens.any()

    def test_ten_thousand_against_wide_multiply(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            ep = dg.gen_multiplication(5, rng)
            inp = ep.input_tokens.tolist()
            a, b = np.int64(digits_to_int(inp[:5])), np.int64(digits_to_int(inp[6:11]))
            assert inp[5] == dg.TIMES
            assert len(ep.target_tokens) == 10
            assert digits_to_int(ep.target_tokens.tolist()) == int(a * b)
            assert answer_mask_after_separator(ep, dg.EQUALS)


class TestSorting:
    def test_example(self):
        class Fixed:
            def integers(self, lo, hi, size):
                return np.array([6, 3, 5])

        ep = dg.gen_sorting(3, 100, Fixed())
        assert ep.input_tokens.tolist() == [6, 3, 5, 100]
        assert ep.target_tokens.tolist() == [3, 5, 6]

    def test_ten_thousand_against_sorted(self):
        rng = np.random.default_rng(6)
        for _ in range(10_000):
            ep = dg.gen_sorting(10, 100, rng)
            assert ep.target_tokens.tolist() == sorted(ep.input_tokens[:-1].tolist())
            assert answer_mask_after_separator(ep, 100)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            dg.gen_sorting(0, 100, np.random.default_rng(0))


class TestLanguageModelling:
    def test_one_word_corpus(self):
        eps, vocab = dg.build_lm_dataset("hop " * 128, vocab_size=2000, seq_len=64)
        assert vocab.words == ["hop"] and vocab.size == 3
        assert (vocab.unk, vocab.pad) == (1, 2)
        assert len(eps) == 2
        assert all(ep.target_tokens.tolist() == [0] for ep in eps)

    def test_rank_cutoff_maps_to_unk(self):
        # word i appears 100 - i times, so ranks are w0 > w1 > ...
        text = " ".join(f"w{i}" for i in range(5) for _ in range(100 - i))
        _, vocab = dg.build_lm_dataset(text, vocab_size=4, seq_len=8)
        assert vocab.words == ["w0", "w1", "w2", "w3"]
        assert vocab.encode_words(["w4", "w0"]).tolist() == [vocab.unk, 0]

    def test_window_count_and_supervision(self):
        words = " ".join(f"t{i % 37}" for i in range(1000))
        eps, _ = dg.build_lm_dataset(words, seq_len=64)
        assert len(eps) == 1000 // 64
        for ep in eps:
            assert len(ep.tokens) == 64
            assert np.flatnonzero(ep.loss_mask).tolist() == [63]

    def test_tokenizer_splits_punctuation(self):
        assert dg.tokenize_words("The cat, sat.") == ["the", "cat", ",", "sat", "."]

    def test_short_corpus(self):
        with pytest.raises(ValueError):
            dg.build_lm_dataset("too short", seq_len=64)


class TestTokenAccuracy:
    def test_perfect(self):
        t = np.array([0, 3, 2])
        assert dg.token_accuracy(np.eye(4)[t], t) == 1.0

    def test_half(self):
        logits = np.eye(3)[[0, 1, 2, 0]]
        assert dg.token_accuracy(logits, [0, 1, 0, 1]) == 0.5

    def test_ties_go_to_lowest_id(self):
        assert dg.token_accuracy(np.zeros((2, 5)), [0, 4]) == 0.5

    def test_uniform_logits_random_targets(self):
        rng = np.random.default_rng(7)
        targets = rng.integers(0, 100, 10_000)
        acc = dg.token_accuracy(rng.random((10_000, 100)), targets)
        assert abs(acc - 0.01) < 0.005

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            dg.token_accuracy(np.zeros((2, 3)), [0, 1], mask=[False, False])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_off_mask_logits_do_not_matter(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((20, 6))
        targets = rng.integers(0, 6, 20)
        mask = rng.random(20) < 0.5
        mask[0] = True
        before = dg.token_accuracy(logits, targets, mask)
        logits[~mask] = rng.standard_normal(((~mask).sum(), 6)) * 100
        assert dg.token_accuracy(logits, targets, mask) == before
