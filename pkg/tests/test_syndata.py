import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundusclip import syndata as sdata
from fundusclip.rng import Rng
from fundusclip.syndata import (
    DISEASES, DEFAULT_PRIORS, READABILITY_PROBS, MAX_CAPTION_WORDS,
    NORMAL_TEMPLATES, CAPTION_MARKERS,
    DiseaseLabelVector, ReadabilityLabels, SceneRecipe,
    sample_labels, sample_recipe, generate_caption, caption_vocabulary_words,
    build_pair, generate_corpus, split_corpus,
    write_ppm, read_ppm, write_corpus, manifest_record, detect_finding,
)


class TestLabels:
    def test_mild_and_severe_are_exclusive(self):
        with pytest.raises(ValueError):
            DiseaseLabelVector(diabetic_retinopathy_mild=True,
                               diabetic_retinopathy_severe=True)

    def test_dr_grade_mapping(self):
        assert DiseaseLabelVector().dr_grade == 0
        assert DiseaseLabelVector(diabetic_retinopathy_mild=True).dr_grade == 2
        assert DiseaseLabelVector(diabetic_retinopathy_severe=True).dr_grade == 4

    def test_int_vector_round_trip(self):
        v = DiseaseLabelVector(glaucoma=True, cataract_haze=True)
        assert DiseaseLabelVector.from_ints(v.as_ints()) == v
        with pytest.raises(ValueError):
            DiseaseLabelVector.from_ints([1] * 7)
        with pytest.raises(ValueError):
            DiseaseLabelVector.from_ints([2] + [0] * 7)

    def test_readability_range_checked(self):
        with pytest.raises(ValueError):
            ReadabilityLabels(macula=3)
        assert ReadabilityLabels.from_ints([0, 1, 2, 0]).as_ints() == [0, 1, 2, 0]

    def test_invalid_priors_rejected(self):
        with pytest.raises(ValueError):
            sample_labels(Rng(0), {"no_such_disease": 0.5})
        with pytest.raises(ValueError):
            sample_labels(Rng(0), {"glaucoma": 1.5})
        with pytest.raises(ValueError):
            sample_labels(Rng(0), {"diabetic_retinopathy_mild": 0.7,
                                   "diabetic_retinopathy_severe": 0.7})

    def test_marginals_match_priors(self):
        n = 30_000
        rng = Rng(99)
        counts = dict.fromkeys(DISEASES, 0)
        read_counts = np.zeros(3, dtype=int)
        for _ in range(n):
            labels, readability = sample_labels(rng)
            for d in labels.active():
                counts[d] += 1
            for s in readability.as_ints():
                read_counts[s] += 1
        for d in DISEASES:
            assert abs(counts[d] / n - DEFAULT_PRIORS[d]) < 0.015, d
        freq = read_counts / (4 * n)
        np.testing.assert_allclose(freq, READABILITY_PROBS, atol=0.015)


class TestRecipes:
    def test_cup_ratio_reflects_glaucoma(self):
        rng = Rng(5)
        for _ in range(50):
            on = sample_recipe(DiseaseLabelVector(glaucoma=True),
                               ReadabilityLabels(), rng.derive(_))
            off = sample_recipe(DiseaseLabelVector(),
                                ReadabilityLabels(), rng.derive(_ + 1000))
            assert on.cup_to_disc_ratio >= 0.65
            assert off.cup_to_disc_ratio <= 0.55

    def test_recipe_validates_cup_ratio(self):
        rng = Rng(1)
        good = sample_recipe(DiseaseLabelVector(), ReadabilityLabels(), rng)
        with pytest.raises(ValueError):
            SceneRecipe(**{**good.__dict__, "cup_to_disc_ratio": 0.95})

    def test_disease_primitives_present(self):
        rng = Rng(11)
        rec = sample_recipe(
            DiseaseLabelVector(diabetic_retinopathy_severe=True,
                               vein_occlusion=True, pathological_myopia=True),
            ReadabilityLabels(), rng)
        assert rec.hemorrhages and rec.wedge and rec.tessellation
        assert not rec.microaneurysms and not rec.drusen


class TestCaptions:
    def test_closed_grammar_and_length(self):
        vocab = set(caption_vocabulary_words())
        rng = Rng(17)
        for i in range(2000):
            labels, readability = sample_labels(rng)
            cap = generate_caption(labels, readability, rng)
            words = cap.split()
            assert len(words) <= MAX_CAPTION_WORDS, cap
            assert set(words) <= vocab, cap

    def test_marker_word_iff_flag(self):
        rng = Rng(23)
        for i in range(2000):
            labels, readability = sample_labels(rng)
            words = set(generate_caption(labels, readability, rng).split())
            for d in DISEASES:
                hit = bool(words & CAPTION_MARKERS[d])
                assert hit == labels.get(d), (d, words)

    def test_normal_caption_drawn_from_templates(self):
        rng = Rng(31)
        seen = set()
        for _ in range(200):
            cap = generate_caption(DiseaseLabelVector(), ReadabilityLabels(), rng)
            assert cap in NORMAL_TEMPLATES
            seen.add(cap)
        assert seen == set(NORMAL_TEMPLATES)

    def test_quality_clause_only_when_poorly_readable(self):
        rng = Rng(41)
        labels = DiseaseLabelVector(glaucoma=True)
        poor = generate_caption(labels, ReadabilityLabels(whole_image=0), rng)
        good = generate_caption(labels, ReadabilityLabels(), rng)
        assert poor.split()[0] in ("poor", "blurry")
        assert good.split()[0] not in ("poor", "blurry")


class TestCorpus:
    def test_pair_is_pure_function_of_seed_and_id(self):
        a = build_pair(404, 7)
        b = build_pair(404, 7)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.caption == b.caption and a.labels == b.labels
        assert a.seed == b.seed

    def test_pairs_independent_of_batch_context(self):
        corpus = generate_corpus(12, 404)
        lone = build_pair(404, 7)
        np.testing.assert_array_equal(corpus[7].image, lone.image)
        assert corpus[7].caption == lone.caption

    def test_thread_count_does_not_change_output(self):
        serial = generate_corpus(16, 88, threads=1)
        parallel = generate_corpus(16, 88, threads=8)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.caption == b.caption

    def test_minimum_corpus_size(self):
        with pytest.raises(ValueError):
            generate_corpus(9, 1)

    def test_images_are_valid(self):
        for p in generate_corpus(10, 3):
            assert p.image.shape == (3, 64, 64)
            assert p.image.min() >= 0.0 and p.image.max() <= 1.0

    def test_haze_brightens_image_corners(self):
        hazy = sample_recipe(DiseaseLabelVector(cataract_haze=True),
                             ReadabilityLabels(), Rng(2))
        clear = sample_recipe(DiseaseLabelVector(), ReadabilityLabels(), Rng(2))
        img_h = sdata.render_image(hazy)
        img_c = sdata.render_image(clear)
        assert img_h[:, :4, :4].mean() > img_c[:, :4, :4].mean() + 0.1


class TestSplit:
    def test_split_law_large(self):
        train, val, test = split_corpus(list(range(1_000_000)), seed=6)
        assert len(train) == 800_000
        assert len(val) == 100_000
        assert len(test) == 100_000

    def test_deterministic_and_disjoint(self):
        items = list(range(1000))
        a = split_corpus(items, seed=9)
        b = split_corpus(items, seed=9)
        assert [sorted(x) for x in a] == [sorted(x) for x in b]
        assert a[0][:5] == b[0][:5]
        joined = a[0] + a[1] + a[2]
        assert sorted(joined) == items

    def test_split_attribute_assigned_to_pairs(self):
        pairs = generate_corpus(10, 55)
        train, val, test = split_corpus(pairs, seed=55)
        assert all(p.split == "train" for p in train)
        assert all(p.split == "val" for p in val)
        assert all(p.split == "test" for p in test)

    def test_too_small_to_split(self):
        with pytest.raises(ValueError):
            split_corpus(list(range(9)), seed=0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(min_value=10, max_value=5000),
           seed=st.integers(min_value=0, max_value=2**32 - 1))
    def test_split_law_property(self, n, seed):
        train, val, test = split_corpus(list(range(n)), seed)
        assert len(train) == int(0.8 * n)
        assert len(val) == int(0.1 * n)
        assert len(test) == n - len(train) - len(val)
        assert sorted(train + val + test) == list(range(n))


class TestPpmAndManifest:
    def test_ppm_round_trip_is_exact_after_quantization(self, tmp_path):
        img = Rng(8).uniform(0, 1, (3, 9, 13))
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        np.testing.assert_array_equal(back, np.round(img * 255) / 255.0)

    def test_ppm_header_comments_tolerated(self, tmp_path):
        path = tmp_path / "c.ppm"
        body = bytes(12)
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + body)
        assert read_ppm(path).shape == (3, 2, 2)

    def test_ppm_errors(self, tmp_path):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(ValueError, match="P6"):
            read_ppm(bad)
        trunc = tmp_path / "trunc.ppm"
        trunc.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ValueError, match="truncated"):
            read_ppm(trunc)
        deep = tmp_path / "deep.ppm"
        deep.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(ValueError, match="maxval"):
            read_ppm(deep)

    def test_write_corpus_layout(self, tmp_path):
        import json
        pairs = generate_corpus(10, 12)
        split_corpus(pairs, seed=12)
        manifest = write_corpus(pairs, tmp_path)
        lines = open(manifest, encoding="utf-8").read().splitlines()
        assert len(lines) == 10
        records = [json.loads(ln) for ln in lines]
        assert [r["id"] for r in records] == list(range(10))
        for rec, pair in zip(records, sorted(pairs, key=lambda p: p.id)):
            assert rec["caption"] == pair.caption
            assert rec["labels"] == pair.labels.as_ints()
            assert rec["readability"] == pair.readability.as_ints()
            assert rec["split"] in ("train", "val", "test")
            img = read_ppm(tmp_path / rec["image_path"])
            np.testing.assert_array_equal(img, np.round(pair.image * 255) / 255)


def test_detectors_recover_flags():
    """Smoke check of the documented pixel statistics on a small fresh corpus;
    the full 1000-sample gate lives in the acceptance suite."""
    pairs = generate_corpus(80, 314)
    for disease in DISEASES:
        hits = sum(detect_finding(p.image, disease) == p.labels.get(disease)
                   for p in pairs)
        assert hits / len(pairs) >= 0.9, disease
