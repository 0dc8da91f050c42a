import json

import pandas as pd
import pytest

from app import EXIT_DATA, EXIT_OK, EXIT_USAGE
from app.services.workload import read_trace


@pytest.fixture
def trace_file(tmp_path, cli, runner):
    path = tmp_path / 'trace.jsonl'
    result = runner.invoke(cli, ['gen-trace', '--out', str(path), '--requests', '40',
                                 '--objects', '3', '--backgrounds', '3', '--seed', '2'])
    assert result.exit_code == EXIT_OK, result.output
    return path


class TestGenTrace:
    def test_writes_trace(self, trace_file):
        trace = read_trace(trace_file)
        assert len(trace) == 40
        assert trace.spec.embed_dim == 64
        assert trace.spec.seed == 2

    def test_rerun_is_byte_identical(self, tmp_path, cli, runner, trace_file):
        again = tmp_path / 'again.jsonl'
        result = runner.invoke(cli, ['gen-trace', '--out', str(again), '--requests', '40',
                                     '--objects', '3', '--backgrounds', '3', '--seed', '2'])
        assert result.exit_code == EXIT_OK
        assert again.read_bytes() == trace_file.read_bytes()

    def test_negative_zipf(self, tmp_path, cli, runner):
        result = runner.invoke(cli, ['gen-trace', '--out', str(tmp_path / 't.jsonl'),
                                     '--zipf', '-1'])
        assert result.exit_code == EXIT_USAGE

    def test_missing_out(self, cli, runner):
        assert runner.invoke(cli, ['gen-trace']).exit_code == EXIT_USAGE


class TestSimulate:
    def test_writes_outputs(self, tmp_path, cli, runner, trace_file):
        out = tmp_path / 'run'
        result = runner.invoke(cli, ['simulate', '--trace', str(trace_file), '--out', str(out),
                                     '--window', '10'])
        assert result.exit_code == EXIT_OK, result.output

        document = json.loads((out / 'metrics.json').read_text())
        assert document['status'] == 'success'
        assert document['data']['trace']['requests'] == 40
        assert [run['policy'] for run in document['data']['runs']] == ['lrbu']
        assert len(pd.read_csv(out / 'requests.csv')) == 40
        assert len(pd.read_csv(out / 'windows.csv')) == 4

    def test_metrics_are_deterministic(self, tmp_path, cli, runner, trace_file):
        for name in ('a', 'b'):
            result = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                         '--out', str(tmp_path / name)])
            assert result.exit_code == EXIT_OK
        for file_name in ('metrics.json', 'requests.csv', 'windows.csv'):
            assert (tmp_path / 'a' / file_name).read_bytes() == \
                (tmp_path / 'b' / file_name).read_bytes()

    def test_all_policies(self, tmp_path, cli, runner, trace_file):
        out = tmp_path / 'run'
        result = runner.invoke(cli, ['simulate', '--trace', str(trace_file), '--out', str(out),
                                     '--policy', 'all', '--snapshot', str(out / 'cache.snap')])
        assert result.exit_code == EXIT_OK, result.output
        for policy in ('lrbu', 'lru', 'lcbfu', 'fifo'):
            assert (out / f'requests-{policy}.csv').exists()
            assert (out / f'windows-{policy}.csv').exists()
            assert (out / f'cache-{policy}.snap').exists()
        runs = json.loads((out / 'metrics.json').read_text())['data']['runs']
        assert len(runs) == 4

    def test_snapshot_and_resume(self, tmp_path, cli, runner, trace_file):
        snap = tmp_path / 'cache.snap'
        first = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                    '--out', str(tmp_path / 'a'), '--snapshot', str(snap)])
        assert first.exit_code == EXIT_OK
        second = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                     '--out', str(tmp_path / 'b'), '--resume', str(snap)])
        assert second.exit_code == EXIT_OK, second.output

    def test_missing_trace(self, tmp_path, cli, runner):
        result = runner.invoke(cli, ['simulate', '--trace', str(tmp_path / 'absent.jsonl'),
                                     '--out', str(tmp_path / 'run')])
        assert result.exit_code == EXIT_USAGE

    def test_corrupt_trace(self, tmp_path, cli, runner):
        path = tmp_path / 'bad.jsonl'
        path.write_text('this is not json\n')
        result = runner.invoke(cli, ['simulate', '--trace', str(path),
                                     '--out', str(tmp_path / 'run')])
        assert result.exit_code == EXIT_DATA

    def test_corrupt_snapshot(self, tmp_path, cli, runner, trace_file):
        snap = tmp_path / 'cache.snap'
        snap.write_bytes(b'FLXC' + b'\x00' * 8)
        result = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                     '--out', str(tmp_path / 'run'), '--resume', str(snap)])
        assert result.exit_code == EXIT_DATA

    def test_bad_bins(self, tmp_path, cli, runner, trace_file):
        result = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                     '--out', str(tmp_path / 'run'), '--bins', '0.9,0.8'])
        assert result.exit_code == EXIT_USAGE

    def test_unknown_policy(self, tmp_path, cli, runner, trace_file):
        result = runner.invoke(cli, ['simulate', '--trace', str(trace_file),
                                     '--out', str(tmp_path / 'run'), '--policy', 'random'])
        assert result.exit_code == EXIT_USAGE


class TestBenchPolicies:
    def test_table(self, tmp_path, cli, runner, trace_file):
        out = tmp_path / 'bench.csv'
        result = runner.invoke(cli, ['bench-policies', '--trace', str(trace_file),
                                     '--out', str(out), '--capacities', '0,64KiB',
                                     '--capacity-fractions', '0.5'])
        assert result.exit_code == EXIT_OK, result.output
        table = pd.read_csv(out)
        assert len(table) == 12
        assert set(table['policy']) == {'lrbu', 'lru', 'lcbfu', 'fifo'}

    def test_rerun_is_byte_identical(self, tmp_path, cli, runner, trace_file):
        for name in ('a.csv', 'b.csv'):
            result = runner.invoke(cli, ['bench-policies', '--trace', str(trace_file),
                                         '--out', str(tmp_path / name), '--capacities', '32KiB',
                                         '--policies', 'lru,fifo'])
            assert result.exit_code == EXIT_OK
        assert (tmp_path / 'a.csv').read_bytes() == (tmp_path / 'b.csv').read_bytes()

    def test_needs_capacities(self, tmp_path, cli, runner, trace_file):
        result = runner.invoke(cli, ['bench-policies', '--trace', str(trace_file),
                                     '--out', str(tmp_path / 'bench.csv')])
        assert result.exit_code == EXIT_USAGE


class TestCodec:
    def test_zero_motion_preset(self, tmp_path, cli, runner):
        out = tmp_path / 'codec.json'
        result = runner.invoke(cli, ['codec', '--preset', 'zero-motion', '--out', str(out)])
        assert result.exit_code == EXIT_OK, result.output
        block = json.loads(out.read_text())['data']['thresholds'][0]
        assert block['threshold'] == 0.99
        assert block['common_key_frames'] == 1
        assert block['ratio'] > 1
        assert out.with_suffix('.csv').exists()

    def test_latent_file_round_trip(self, tmp_path, cli, runner):
        latent_file = tmp_path / 'latents.flxl'
        first = tmp_path / 'first.json'
        second = tmp_path / 'second.json'
        result = runner.invoke(cli, ['codec', '--write-latents', str(latent_file),
                                     '--out', str(first), '--threshold', '0.95'])
        assert result.exit_code == EXIT_OK, result.output
        result = runner.invoke(cli, ['codec', '--latent-file', str(latent_file),
                                     '--out', str(second), '--threshold', '0.95'])
        assert result.exit_code == EXIT_OK, result.output
        assert first.read_bytes() == second.read_bytes()

    def test_corrupt_latent_file(self, tmp_path, cli, runner):
        latent_file = tmp_path / 'latents.flxl'
        latent_file.write_bytes(b'NOPE' + b'\x00' * 32)
        result = runner.invoke(cli, ['codec', '--latent-file', str(latent_file)])
        assert result.exit_code == EXIT_DATA
