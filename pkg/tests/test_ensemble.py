import itertools
import time

import numpy as np
import pytest

from emodial.data import LABELS, DataError
from emodial.ensemble import (PredictionSet, final_ensemble, format_predictions, majority_vote,
                              read_predictions, vote_committee)


def vote_oracle(votes):
    counts = {lab: votes.count(lab) for lab in set(votes)}
    top = max(counts.values())
    winners = [lab for lab, c in counts.items() if c == top]
    return winners[0] if len(winners) == 1 else "others"


class TestMajorityVote:
    def test_exhaustive_against_oracle(self):
        start = time.perf_counter()
        n = 0
        for k in range(1, 5):
            for votes in itertools.product(LABELS, repeat=k):
                assert majority_vote(list(votes)) == vote_oracle(list(votes)), votes
                n += 1
        assert n == 4 + 16 + 64 + 256
        assert time.perf_counter() - start < 1.0

    def test_three_way_tie(self):
        assert majority_vote(["happy", "sad", "angry"]) == "others"

    def test_two_way_emotion_tie(self):
        assert majority_vote(["happy", "sad", "happy", "sad"]) == "others"

    def test_clear_winner(self):
        assert majority_vote(["angry", "angry", "sad"]) == "angry"

    def test_empty(self):
        with pytest.raises(ValueError):
            majority_vote([])


def pset(name, labels, ids=None):
    return PredictionSet(name, ids or [str(i) for i in range(len(labels))], list(labels))


class TestCommittee:
    def test_rowwise_vote_and_shares(self):
        sets = [pset("a", ["happy", "sad"]), pset("b", ["happy", "angry"]), pset("c", ["sad", "others"])]
        out = vote_committee(sets)
        assert out.labels == ["happy", "others"]
        np.testing.assert_allclose(out.probs[0], [2 / 3, 1 / 3, 0, 0])
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0)

    def test_single_voter_identity(self):
        s = pset("a", ["happy", "sad", "others"])
        assert vote_committee([s]).labels == s.labels

    def test_final_mixes_ensembles_and_models(self):
        rng = np.random.default_rng(0)
        committees = [vote_committee([pset(f"m{j}", [LABELS[i] for i in rng.integers(0, 4, 30)])
                                      for j in range(3)]) for _ in range(2)]
        single = pset("x", [LABELS[i] for i in rng.integers(0, 4, 30)])
        final = final_ensemble(committees + [single])
        for i in range(30):
            votes = [committees[0].labels[i], committees[1].labels[i], single.labels[i]]
            assert final.labels[i] == vote_oracle(votes)

    def test_misaligned(self):
        with pytest.raises(DataError):
            vote_committee([pset("a", ["happy"], ["1"]), pset("b", ["happy"], ["2"])])
        with pytest.raises(DataError):
            PredictionSet("a", ["1", "2"], ["happy"])


class TestFiles:
    def test_round_trip_with_probs(self, tmp_path):
        probs = np.array([[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 0.0, 0.0]])
        ps = PredictionSet("m", ["a", "b"], ["others", "happy"], probs)
        path = tmp_path / "m.pred.tsv"
        path.write_text(format_predictions(ps))
        back = read_predictions(path)
        assert back.ids == ps.ids and back.labels == ps.labels
        np.testing.assert_allclose(back.probs, probs)
        assert format_predictions(back) == format_predictions(ps)

    def test_labels_only(self, tmp_path):
        ps = pset("m", ["sad"])
        text = format_predictions(ps)
        assert text == "id\tlabel\n0\tsad\n"
        path = tmp_path / "p.tsv"
        path.write_text(text)
        assert read_predictions(path).probs is None

    @pytest.mark.parametrize("body", ["id\tlabel\n1\tjoy\n", "id\tlabel\n1\tsad\n1\thappy\n",
                                      "id\tlabel\n1\tsad\t0.5\n"])
    def test_bad_files(self, tmp_path, body):
        path = tmp_path / "p.tsv"
        path.write_text(body)
        with pytest.raises(DataError):
            read_predictions(path)
