import json
from collections import Counter

import numpy as np
import pytest

from app.models import CACHED_STEPS, EmbeddingError
from app.services.codec import select_keyframes
from app.services.parsers.base_parser import (
    DataValidationError, FileFormatError, MissingFieldError, ParserError
)
from app.services.parsers.trace_parser import TraceParser
from app.services.similarity import cosine_similarity
from app.services.workload import (
    LatentSpec, TraceSpec, popularity_rankings, read_trace, synth_embedding,
    synth_latents, to_request, trace_header, working_set, write_trace, zipf_weights
)
from app.utils.validation import ValidationError


def embed(tokens, seed=0):
    return synth_embedding(tokens, dim=512, seed=seed).values


def write_lines(path, lines):
    path.write_text(''.join(json.dumps(line) + '\n' for line in lines), encoding='utf-8')
    return path


def record_line(prompt, arrival=None, **overrides):
    line = {
        'prompt': prompt,
        'arrival': prompt if arrival is None else arrival,
        'object_tokens': ['object:0'],
        'background_tokens': ['background:0'],
        'latent_seed': 1,
    }
    line.update(overrides)
    return line


class TestEmbeddings:
    def test_identical_sets(self):
        assert cosine_similarity(embed(['a', 'b']), embed(['b', 'a'])) == pytest.approx(1.0)

    def test_is_deterministic(self):
        np.testing.assert_array_equal(embed(['x', 'y'], seed=4), embed(['x', 'y'], seed=4))

    def test_seed_changes_vectors(self):
        assert not np.array_equal(embed(['x'], seed=1), embed(['x'], seed=2))

    def test_unit_norm(self):
        assert np.linalg.norm(embed(['a', 'b', 'c'])) == pytest.approx(1.0, abs=1e-6)

    def test_empty_set(self):
        with pytest.raises(EmbeddingError):
            synth_embedding([])

    def test_disjoint_sets_are_nearly_orthogonal(self):
        small = [abs(cosine_similarity(embed([f'a{i}']), embed([f'b{i}']))) < 0.2
                 for i in range(1000)]
        assert sum(small) / len(small) > 0.99

    def test_shared_tokens_raise_similarity(self):
        for i in range(1000):
            a, b, c = embed([f'a{i}']), embed([f'a{i}', f'b{i}']), embed([f'c{i}'])
            assert cosine_similarity(a, b) > cosine_similarity(a, c)

    def test_to_request_uses_union_for_whole(self, make_trace):
        trace = make_trace(n_requests=3)
        record = trace.records[0]
        request = to_request(record, dim=64, seed=trace.spec.seed)
        expected = synth_embedding(record.object_tokens + record.background_tokens, 64,
                                   trace.spec.seed)
        np.testing.assert_array_equal(request.whole.values, expected.values)
        assert request.latent_seed == record.latent_seed


class TestTraceGeneration:
    def test_deterministic(self, make_trace):
        assert make_trace(n_requests=200, seed=5) == make_trace(n_requests=200, seed=5)

    def test_seed_matters(self, make_trace):
        a = make_trace(n_requests=200, seed=5)
        b = make_trace(n_requests=200, seed=6)
        assert [r.template for r in a] != [r.template for r in b]

    def test_prompts_are_arrival_indices(self, make_trace):
        trace = make_trace(n_requests=50)
        assert [r.prompt for r in trace] == list(range(50))
        assert [r.arrival for r in trace] == list(range(50))

    def test_same_template_same_seed(self, make_trace):
        trace = make_trace(n_requests=300, n_objects=3, n_backgrounds=3)
        seeds = {}
        for record in trace:
            assert seeds.setdefault(record.template, record.latent_seed) == record.latent_seed
        assert len(working_set(trace)) == len(seeds)

    def test_uniform_popularity(self, make_trace):
        n = 30_000
        trace = make_trace(n_requests=n, n_objects=2, n_backgrounds=3, zipf_s=0.0)
        counts = Counter(r.template for r in trace)
        p = 1 / 6
        sigma = np.sqrt(n * p * (1 - p))
        assert len(counts) == 6
        for count in counts.values():
            assert abs(count - n * p) <= 3 * sigma

    def test_zipf_weights(self):
        weights = zipf_weights(4, 1.0)
        np.testing.assert_allclose(weights, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))
        np.testing.assert_allclose(zipf_weights(3, 0.0), [1 / 3] * 3)

    def test_skewed_popularity(self, make_trace):
        trace = make_trace(n_requests=5000, n_objects=8, n_backgrounds=8, zipf_s=1.2)
        counts = Counter(r.template for r in trace).most_common()
        assert counts[0][1] > 10 * counts[-1][1]

    def test_no_decay_keeps_one_ranking(self):
        assert len(popularity_rankings(TraceSpec(n_requests=10_000, embed_dim=8))) == 1

    def test_decay_reranks_below_sticky_top(self):
        spec = TraceSpec(n_requests=1000, n_objects=10, n_backgrounds=10, decay_half_life=250,
                         sticky_fraction=0.05, embed_dim=8)
        periods = popularity_rankings(spec)
        assert [start for start, _ in periods] == [0, 250, 500, 750]
        first = periods[0][1]
        for _, ranking in periods[1:]:
            np.testing.assert_array_equal(ranking[:5], first[:5])
            assert sorted(ranking.tolist()) == list(range(100))
        assert not np.array_equal(periods[1][1], first)

    def test_single_template(self, make_trace):
        trace = make_trace(n_requests=10, n_objects=1, n_backgrounds=1)
        assert len({r.latent_seed for r in trace}) == 1
        assert len({r.whole_tokens for r in trace}) == 1

    def test_zero_burst_fraction_keeps_popularity_draws(self, make_trace):
        plain = make_trace(n_requests=500, decay_half_life=100, seed=4)
        unused = make_trace(n_requests=500, decay_half_life=100, seed=4, burst_trends=3,
                            burst_life=2.0)
        assert [r.template for r in plain] == [r.template for r in unused]

    def test_everlasting_single_trend_takes_every_request(self, make_trace):
        trace = make_trace(n_requests=200, burst_fraction=1.0, burst_trends=1, burst_life=1e9)
        assert len({r.template for r in trace}) == 1

    def test_bursts_raise_short_range_repeats(self, make_trace):
        def recent_repeat_share(trace, window=20):
            templates = [r.template for r in trace]
            repeats = sum(t in templates[max(0, i - window):i] for i, t in enumerate(templates))
            return repeats / len(templates)

        kwargs = dict(n_requests=4000, n_objects=20, n_backgrounds=20, zipf_s=0.0, seed=1)
        calm = recent_repeat_share(make_trace(**kwargs))
        bursty = recent_repeat_share(make_trace(burst_fraction=0.5, **kwargs))
        assert calm < 0.1
        assert bursty > 3 * calm

    @pytest.mark.parametrize('kwargs', [
        {'n_requests': 0}, {'zipf_s': -1.0}, {'decay_half_life': 0},
        {'sticky_fraction': 1.5}, {'seed': -1}, {'embed_dim': 0},
        {'burst_fraction': -0.1}, {'burst_trends': 0}, {'burst_life': 0.0},
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValidationError):
            TraceSpec(**kwargs)


class TestTraceFiles:
    def test_round_trip(self, tmp_path, make_trace):
        trace = make_trace(n_requests=100, decay_half_life=30, seed=2)
        path = write_trace(trace, tmp_path / 'trace.jsonl')
        assert read_trace(path) == trace

    def test_rewrite_is_byte_identical(self, tmp_path, make_trace):
        trace = make_trace(n_requests=40)
        first = write_trace(trace, tmp_path / 'a.jsonl')
        second = write_trace(read_trace(first), tmp_path / 'b.jsonl')
        assert first.read_bytes() == second.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileFormatError, match='not found'):
            read_trace(tmp_path / 'absent.jsonl')

    def test_wrong_suffix(self, tmp_path):
        path = tmp_path / 'trace.csv'
        path.write_text('x')
        with pytest.raises(FileFormatError):
            read_trace(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'trace.jsonl'
        path.write_text('\n')
        with pytest.raises(FileFormatError, match='empty'):
            read_trace(path)

    def test_bad_header(self, tmp_path):
        path = write_lines(tmp_path / 'trace.jsonl', [{'format': 'other'}])
        with pytest.raises(FileFormatError) as excinfo:
            read_trace(path)
        assert excinfo.value.line == 1

    def test_invalid_json_reports_line(self, tmp_path):
        path = write_lines(tmp_path / 'trace.jsonl',
                           [trace_header(TraceSpec(embed_dim=8)), record_line(0)])
        with path.open('a', encoding='utf-8') as fh:
            fh.write('{not json\n')
        with pytest.raises(FileFormatError) as excinfo:
            read_trace(path)
        assert excinfo.value.line == 3
        assert 'line 3' in str(excinfo.value)

    @pytest.mark.parametrize('bad, message', [
        ({'prompt': 'one'}, 'integer'),
        ({'object_tokens': []}, 'non-empty'),
        ({'latent_seed': 1.5}, 'integer'),
        ({'template': [1]}, 'pair'),
        ({'whole_tokens': ['object:0']}, 'union'),
    ])
    def test_invalid_record_reports_line(self, tmp_path, bad, message):
        path = write_lines(tmp_path / 'trace.jsonl', [
            trace_header(TraceSpec(embed_dim=8)), record_line(0), dict(record_line(1), **bad),
        ])
        with pytest.raises(DataValidationError, match=message) as excinfo:
            read_trace(path)
        assert excinfo.value.line == 3

    def test_missing_field(self, tmp_path):
        line = record_line(0)
        del line['latent_seed']
        parser = TraceParser(write_lines(tmp_path / 'trace.jsonl',
                                         [trace_header(TraceSpec(embed_dim=8)), line]))
        parser.parse()
        assert parser.errors[0]['line'] == 2
        assert 'latent_seed' in parser.errors[0]['message']
        with pytest.raises(ParserError):
            parser.read()

    def test_duplicate_prompt(self, tmp_path):
        path = write_lines(tmp_path / 'trace.jsonl', [
            trace_header(TraceSpec(embed_dim=8)), record_line(0), record_line(0, arrival=1),
        ])
        with pytest.raises(DataValidationError, match='Duplicate'):
            read_trace(path)

    def test_arrivals_must_not_decrease(self, tmp_path):
        path = write_lines(tmp_path / 'trace.jsonl', [
            trace_header(TraceSpec(embed_dim=8)), record_line(0, arrival=5),
            record_line(1, arrival=4),
        ])
        with pytest.raises(DataValidationError, match='precedes'):
            read_trace(path)

    def test_errors_are_collected(self, tmp_path):
        parser = TraceParser(write_lines(tmp_path / 'trace.jsonl', [
            trace_header(TraceSpec(embed_dim=8)), dict(record_line(0), prompt=-1), record_line(1),
            record_line(2, latent_seed='x'),
        ]))
        records = parser.parse()
        assert [r.prompt for r in records] == [1]
        assert [e['line'] for e in parser.errors] == [2, 4]

    def test_unknown_fields_warn(self, tmp_path):
        parser = TraceParser(write_lines(tmp_path / 'trace.jsonl', [
            trace_header(TraceSpec(embed_dim=8)), record_line(0), record_line(1, color='red'),
        ]))
        trace = parser.read()
        assert len(trace) == 2
        assert not parser.errors
        assert parser.warnings[0]['line'] == 3
        assert 'color' in parser.warnings[0]['message']

    def test_missing_field_error_type(self):
        assert issubclass(MissingFieldError, ParserError)


class TestLatents:
    def test_shapes_and_steps(self, small_spec):
        latents, masks = synth_latents(3, small_spec)
        assert [latent.step for latent in latents] == list(CACHED_STEPS)
        for latent in latents:
            assert latent.shape == (8, 4, 4, 2)
        assert masks.shape == (8, 4, 4)
        assert masks.object_masks.any(axis=(1, 2)).all()

    def test_deterministic(self, small_spec):
        a, masks_a = synth_latents(3, small_spec)
        b, masks_b = synth_latents(3, small_spec)
        assert all(x.equals(y) for x, y in zip(a, b))
        assert masks_a.equals(masks_b)

    def test_prompt_seed_matters(self, small_spec):
        a, _ = synth_latents(3, small_spec)
        b, _ = synth_latents(4, small_spec)
        assert not a[0].equals(b[0])

    def test_zero_motion_keeps_one_key_frame(self):
        spec = LatentSpec.zero_motion(frames=6, height=3, width=3, channels=2)
        latents, _ = synth_latents(0, spec)
        for latent in latents:
            assert select_keyframes(latent, 0.99).key_indices == (0,)

    def test_redundancy_knob_is_faithful(self):
        redundancy = {5: 0.9, 10: 0.8, 15: 0.6, 20: 0.4, 25: 0.2}
        spec = LatentSpec(frames=11, height=4, width=4, channels=2, noise_sigma=0.0,
                          redundancy_by_step=redundancy)
        for seed in range(5):
            latents, _ = synth_latents(seed, spec)
            for latent in latents:
                keys = len(select_keyframes(latent, 0.99).key_indices)
                assert (spec.frames - keys) / (spec.frames - 1) == pytest.approx(
                    redundancy[latent.step])

    def test_key_frames_are_nested_across_steps(self):
        spec = LatentSpec(frames=12, height=3, width=3, channels=2, noise_sigma=0.0)
        latents, _ = synth_latents(1, spec)
        keys = [set(select_keyframes(latent, 0.99).key_indices) for latent in latents]
        for fewer, more in zip(keys, keys[1:]):
            assert fewer <= more

    def test_no_redundancy(self):
        spec = LatentSpec.no_redundancy(frames=5, height=3, width=3, channels=2)
        latents, _ = synth_latents(0, spec)
        for latent in latents:
            assert len(select_keyframes(latent, 0.99).key_indices) == 5

    @pytest.mark.parametrize('kwargs', [
        {'frames': 0}, {'noise_sigma': -0.1}, {'redundancy_by_step': {5: 1.5}},
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValidationError):
            LatentSpec(**kwargs)

    def test_overrides(self):
        spec = LatentSpec().with_overrides(frames=4, noise_sigma=0.0)
        assert (spec.frames, spec.noise_sigma, spec.height) == (4, 0.0, 40)
