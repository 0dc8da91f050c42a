"""
CLI Commands - trace generation, simulation, policy benchmarks and codec reports.

Every command is deterministic for a fixed trace, configuration and seed; output files
are byte-stable across reruns.
"""
import logging
from pathlib import Path

import click

from app.config import get_config_class, load_run_config
from app.services.entry_format import read_latent_file, write_latent_file
from app.services.replacement_policies import PolicyName
from app.services.simulator import bench_policies, breakdown_table, codec_report, simulate
from app.services.snapshot import save_snapshot
from app.services.workload import (
    LatentSpec, TraceSpec, gen_trace, read_trace, synth_latents, write_trace
)
from app.utils.exporters import success_document, to_json, write_csv, write_json
from app.utils.validation import (
    ValidationError, parse_byte_size, validate_existing_path, validate_float_list
)

logger = logging.getLogger(__name__)

POLICY_CHOICES = [p.value for p in PolicyName] + ['all']
MODE_CHOICES = ['flexcache', 'nirvana', 'nocache']


def _split(value, field_name):
    if value is None:
        return []
    items = [item.strip() for item in str(value).split(',') if item.strip()]
    if not items:
        raise ValidationError(f"{field_name} is empty", field_name)
    return items


def _suffixed(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}-{suffix}{path.suffix}")


def register_cli_commands(cli):
    """Register CLI commands for the application."""

    @cli.command('gen-trace')
    @click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False),
                  help='JSONL file to write.')
    @click.option('--requests', 'n_requests', type=int, default=1000, show_default=True)
    @click.option('--objects', 'n_objects', type=int, default=32, show_default=True)
    @click.option('--backgrounds', 'n_backgrounds', type=int, default=32, show_default=True)
    @click.option('--zipf', 'zipf_s', type=float, default=1.0, show_default=True,
                  help='Popularity skew; 0 is uniform.')
    @click.option('--half-life', 'decay_half_life', type=int, default=None,
                  help='Requests between popularity re-rankings (default: no drift).')
    @click.option('--embed-dim', type=int, default=None,
                  help='Embedding dimension (default from the configuration class).')
    @click.option('--family-size', type=int, default=4, show_default=True)
    @click.option('--sticky-fraction', type=float, default=0.01, show_default=True)
    @click.option('--burst-fraction', type=float, default=0.0, show_default=True,
                  help='Share of requests sent to short-lived trending templates.')
    @click.option('--burst-trends', type=int, default=8, show_default=True)
    @click.option('--burst-life', type=float, default=10.0, show_default=True,
                  help='Mean requests a trending template receives.')
    @click.option('--seed', type=int, default=0, show_default=True)
    @click.pass_context
    def gen_trace_command(ctx, out_path, n_requests, n_objects, n_backgrounds, zipf_s,
                          decay_half_life, embed_dim, family_size, sticky_fraction, burst_fraction,
                          burst_trends, burst_life, seed):
        """Generate a synthetic request trace."""
        if embed_dim is None:
            embed_dim = get_config_class(ctx.obj['config_name']).EMBED_DIM
        spec = TraceSpec(
            n_requests=n_requests,
            n_objects=n_objects,
            n_backgrounds=n_backgrounds,
            zipf_s=zipf_s,
            decay_half_life=decay_half_life,
            embed_dim=embed_dim,
            seed=seed,
            family_size=family_size,
            sticky_fraction=sticky_fraction,
            burst_fraction=burst_fraction,
            burst_trends=burst_trends,
            burst_life=burst_life,
        )
        trace = gen_trace(spec)
        write_trace(trace, out_path)
        click.echo(f"Wrote {len(trace)} requests to {out_path}")

    @cli.command('simulate')
    @click.option('--trace', 'trace_path', required=True, help='Trace JSONL file.')
    @click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False),
                  help='Directory for metrics.json, requests.csv and windows.csv.')
    @click.option('--config', 'config_file', default=None, help='KEY=VALUE run configuration.')
    @click.option('--capacity-bytes', default=None, help='Cache capacity, e.g. 1073741824 or 1GiB.')
    @click.option('--policy', type=click.Choice(POLICY_CHOICES), default=None,
                  help="Replacement policy; 'all' runs the four policies on the same trace.")
    @click.option('--mode', type=click.Choice(MODE_CHOICES), default=None)
    @click.option('--hit-threshold', type=float, default=None)
    @click.option('--compress-threshold', type=float, default=None)
    @click.option('--bins', default=None, help='Comma-separated lower edges of the step bins.')
    @click.option('--gpu-rate', type=float, default=None, help='Dollars per GPU hour.')
    @click.option('--storage-rate', type=float, default=None, help='Dollars per GB-month.')
    @click.option('--seed', type=int, default=None, help='Seed of the synthetic latents.')
    @click.option('--warmup', type=int, default=None, help='Unrecorded warm-up requests.')
    @click.option('--window', type=int, default=None, help='Requests per rolling window.')
    @click.option('--strict-admission', is_flag=True,
                  help='Fail instead of skipping entries larger than the cache.')
    @click.option('--snapshot', 'snapshot_path', default=None,
                  help='Save the final store and index here.')
    @click.option('--resume', 'resume_path', default=None, help='Start from this snapshot.')
    @click.pass_context
    def simulate_command(ctx, trace_path, out_dir, config_file, capacity_bytes, policy, mode,
                         hit_threshold, compress_threshold, bins, gpu_rate, storage_rate, seed,
                         warmup, window, strict_admission, snapshot_path, resume_path):
        """Replay a trace through the cache and write metrics."""
        trace_path = validate_existing_path(trace_path, 'trace')
        if resume_path is not None:
            resume_path = validate_existing_path(resume_path, 'resume')
        trace = read_trace(trace_path)

        run_config = load_run_config(
            ctx.obj['config_name'],
            config_file,
            overrides={
                'CAPACITY_BYTES': capacity_bytes,
                'POLICY': None if policy == 'all' else policy,
                'MODE': mode,
                'HIT_THRESHOLD': hit_threshold,
                'COMPRESS_THRESHOLD': compress_threshold,
                'STEP_BINS': bins,
                'GPU_RATE': gpu_rate,
                'STORAGE_RATE': storage_rate,
                'SEED': seed,
                'WARMUP_REQUESTS': warmup,
                'WINDOW': window,
                'STRICT_ADMISSION': True if strict_admission else None,
                'EMBED_DIM': trace.spec.embed_dim,
            },
            trace=trace_path,
            out_dir=out_dir,
        )
        policies = list(PolicyName) if policy == 'all' else [run_config.policy]
        out_dir = Path(out_dir)

        runs = []
        for name in policies:
            result = simulate(trace, run_config, policy=name, resume=resume_path)
            suffix = name.value if len(policies) > 1 else None
            requests_csv = out_dir / 'requests.csv'
            windows_csv = out_dir / 'windows.csv'
            if suffix:
                requests_csv = _suffixed(requests_csv, suffix)
                windows_csv = _suffixed(windows_csv, suffix)
            write_csv(requests_csv, result.outcomes)
            write_csv(windows_csv, result.windows)
            if snapshot_path:
                target = Path(snapshot_path)
                if suffix:
                    target = _suffixed(target, suffix)
                save_snapshot(result.store, result.index, target)
            runs.append(result.to_dict())
            click.echo(f"{name.value}: hit rate {result.metrics.hit_rate:.4f}, savings "
                       f"{result.metrics.computation_savings:.4f}, throughput "
                       f"{result.throughput_vs_nocache:.4f}x")

        write_json(out_dir / 'metrics.json', success_document({
            'config': run_config.to_dict(),
            'trace': {'requests': len(trace), 'spec': trace.spec.to_dict()},
            'runs': runs,
        }))

    @cli.command('bench-policies')
    @click.option('--trace', 'trace_path', required=True, help='Trace JSONL file.')
    @click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False),
                  help='CSV file to write.')
    @click.option('--config', 'config_file', default=None, help='KEY=VALUE run configuration.')
    @click.option('--capacities', default=None, help='Comma-separated capacities, e.g. 1MB,10MB.')
    @click.option('--capacity-fractions', default=None,
                  help='Comma-separated fractions of the working-set bytes.')
    @click.option('--policies', default=None, help='Comma-separated policies (default: all four).')
    @click.option('--mode', type=click.Choice(MODE_CHOICES), default=None)
    @click.option('--hit-threshold', type=float, default=None)
    @click.option('--compress-threshold', type=float, default=None)
    @click.option('--seed', type=int, default=None, help='Seed of the synthetic latents.')
    @click.option('--warmup', type=int, default=None, help='Unrecorded warm-up requests.')
    @click.pass_context
    def bench_policies_command(ctx, trace_path, out_path, config_file, capacities,
                               capacity_fractions, policies, mode, hit_threshold,
                               compress_threshold, seed, warmup):
        """Hit rate and computation savings for every capacity x policy."""
        trace_path = validate_existing_path(trace_path, 'trace')
        trace = read_trace(trace_path)
        run_config = load_run_config(
            ctx.obj['config_name'],
            config_file,
            overrides={
                'MODE': mode,
                'HIT_THRESHOLD': hit_threshold,
                'COMPRESS_THRESHOLD': compress_threshold,
                'SEED': seed,
                'WARMUP_REQUESTS': warmup,
                'EMBED_DIM': trace.spec.embed_dim,
            },
            trace=trace_path,
        )
        sizes = [parse_byte_size(c, 'capacities') for c in _split(capacities, 'capacities')]
        fractions = None
        if capacity_fractions is not None:
            fractions = validate_float_list(capacity_fractions, 'capacity-fractions', min_value=0.0)
        names = [PolicyName.parse(p) for p in _split(policies, 'policies')] or None

        table = bench_policies(trace, run_config, capacities=sizes, fractions=fractions,
                               policies=names)
        write_csv(out_path, table)
        click.echo(f"Wrote {len(table)} cells to {out_path}")

    @cli.command('codec')
    @click.option('--latent-file', default=None, help='Read latents from this file.')
    @click.option('--write-latents', default=None, help='Also save the latents to this file.')
    @click.option('--threshold', 'thresholds', type=float, multiple=True,
                  help='Key-frame threshold; repeat to compare several (default 0.99).')
    @click.option('--preset', type=click.Choice(['default', 'zero-motion', 'no-redundancy']),
                  default='default', show_default=True, help='Synthetic latent structure.')
    @click.option('--frames', type=int, default=None)
    @click.option('--height', type=int, default=None)
    @click.option('--width', type=int, default=None)
    @click.option('--channels', type=int, default=None)
    @click.option('--noise-sigma', type=float, default=None)
    @click.option('--redundancy', default=None, help='Five comma-separated fractions.')
    @click.option('--alpha-schedule', default=None, help='Five comma-separated scales.')
    @click.option('--seed', type=int, default=0, show_default=True, help='Prompt seed.')
    @click.option('--config', 'config_file', default=None, help='KEY=VALUE run configuration.')
    @click.option('--out', 'out_path', default=None, type=click.Path(dir_okay=False),
                  help='JSON report (a breakdown CSV is written beside it).')
    @click.pass_context
    def codec_command(ctx, latent_file, write_latents, thresholds, preset, frames, height, width,
                      channels, noise_sigma, redundancy, alpha_schedule, seed, config_file,
                      out_path):
        """Compress, decompress and report sizes and fidelity."""
        if latent_file:
            latents, masks = read_latent_file(validate_existing_path(latent_file, 'latent-file'))
        else:
            run_config = load_run_config(ctx.obj['config_name'], config_file, overrides={
                'FRAMES': frames,
                'HEIGHT': height,
                'WIDTH': width,
                'CHANNELS': channels,
                'NOISE_SIGMA': noise_sigma,
                'REDUNDANCY_BY_STEP': redundancy,
                'ALPHA_SCHEDULE': alpha_schedule,
            })
            spec = run_config.latent_spec
            geometry = dict(frames=spec.frames, height=spec.height, width=spec.width,
                            channels=spec.channels, alpha_schedule=spec.alpha_schedule,
                            seed=spec.seed)
            if preset == 'zero-motion':
                spec = LatentSpec.zero_motion(**geometry)
            elif preset == 'no-redundancy':
                spec = LatentSpec.no_redundancy(**geometry)
            latents, masks = synth_latents(seed, spec)

        if write_latents:
            write_latent_file(write_latents, latents, masks)

        result = codec_report(latents, masks, thresholds or (0.99,), prompt=seed)
        document = success_document(result)
        if out_path:
            write_json(out_path, document)
            write_csv(Path(out_path).with_suffix('.csv'), breakdown_table(result))
        else:
            click.echo(to_json(document), nl=False)
