# RADAPT COMMAND LINE
#
# NOTE: run_settings.py is read at start-up (environment flags, statsd host).
#       Each subcommand writes its outputs and a manifest.json into --output-dir.
#
# Exit codes: 0 valid / success, 1 I/O or input error, 2 inverted element found,
#             3 undecided at the maximum subdivision depth, 4 solver failure.

import os
import traceback
from time import time
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
from click.core import ParameterSource
from statsd import StatsClient

from app_settings.app_settings import AppSettings
from general_tools.file_utils import load_config_file, make_dir, read_csv_floats, write_csv_file, write_json_file
from mesh_tools.basis import gll_nodes, lagrange_eval
from mesh_tools.bounds import BoundsError, Verdict, bernstein_lower_bound, bound_function_1d, build_bound_table
from mesh_tools.mesh import MeshError, extract_boundary, load_mesh, save_mesh
from mesh_tools.svg_export import save_svg
from mesh_tools.validity import certify_mesh
from optimizer_tools.solver import MeshOptimizer, SolverConfig, SolverError
from optimizer_tools.tangential import BlendError, closest_point
from optimizer_tools.tmop import TmopError, ideal_shape_target, parse_metric
from run_settings import TOOL_VERSION, graphite_url, prefix, stats_prefix

OUR_NAME = 'HO-Mesh-Radapt'
EXIT_OK, EXIT_IO, EXIT_NEGATIVE, EXIT_UNDECIDED, EXIT_SOLVER = 0, 1, 2, 3, 4
VERDICT_EXIT_CODES = {Verdict.POSITIVE: EXIT_OK, Verdict.NEGATIVE: EXIT_NEGATIVE,
                      Verdict.UNDECIDED: EXIT_UNDECIDED}
BOUNDS_SAMPLES = 201
# Config-file keys that differ from the click parameter names
CONFIG_ALIASES = {'m': 'control_nodes', 'metric_name': 'metric'}

AppSettings(prefix=prefix)
radapt_stats_prefix = f'{stats_prefix}.radapt'
stats_client = StatsClient(host=graphite_url, port=8125)


def parse_attrs(value) -> List[int]:
    """
    '5,6' or [5, 6] or 5 -> [5, 6]
    """
    if value is None or value == '':
        return []
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    if isinstance(value, int):
        return [value]
    return [int(v) for v in str(value).replace(' ', '').split(',') if v]


def apply_config_file(ctx: click.Context, params: Dict[str, Any]) -> Dict[str, Any]:
    """
    Fills parameters left at their defaults from --config; flags given explicitly win.
    """
    config_path = params.get('config')
    if not config_path:
        return params
    resolved = dict(params)
    for key, value in load_config_file(config_path).items():
        key = CONFIG_ALIASES.get(key.lower(), key)
        if key not in resolved or key == 'config':
            AppSettings.logger.warning(f"Ignoring unknown key '{key}' in {config_path}")
            continue
        if ctx.get_parameter_source(key) in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP, None):
            resolved[key] = value
    return resolved


def solver_config(params: Dict[str, Any]) -> SolverConfig:
    attrs = parse_attrs(params.get('tangential_attrs'))
    return SolverConfig(mode=params['mode'], eps_conv=float(params['eps_conv']), max_iters=int(params['max_iters']),
                        validity=params['validity'], barrier=params['barrier'], qrefine=bool(params['qrefine']),
                        eps_q=float(params['eps_q']), quad_order=int(params['order_quad']),
                        max_quad_order=int(params['max_quad_order']),
                        tangential=bool(attrs), tangential_attrs=frozenset(attrs),
                        control_nodes=params.get('control_nodes'), max_depth=int(params['max_depth']))


class RunRecorder:
    """
    Collects what a run did for its manifest and its statsd timings.
    """

    def __init__(self, command: str, params: Dict[str, Any]):
        self.command = command
        self.params = params
        self.output_dir = make_dir(params.get('output_dir') or AppSettings.output_dir)
        self.outputs: List[str] = []
        self.stages: Dict[str, float] = {}
        self.start_time = time()
        self._stage_start = self.start_time
        stats_client.incr(f'{radapt_stats_prefix}.{command}.attempted')

    def path(self, file_name: str) -> str:
        full = os.path.join(self.output_dir, file_name)
        self.outputs.append(full)
        return full

    def stage(self, name: str) -> None:
        now = time()
        self.stages[name] = round(now - self._stage_start, 6)
        self._stage_start = now

    def finish(self, exit_code: int, extra: Optional[Dict[str, Any]] = None) -> int:
        elapsed_milliseconds = int((time() - self.start_time) * 1000)
        stats_client.timing(f'{radapt_stats_prefix}.{self.command}.duration', elapsed_milliseconds)
        if exit_code == EXIT_OK:
            stats_client.incr(f'{radapt_stats_prefix}.{self.command}.completed')
        manifest = {
            'subcommand': self.command,
            'tool_version': TOOL_VERSION,
            'config': {k: (sorted(v) if isinstance(v, (set, frozenset)) else v) for k, v in self.params.items()},
            'outputs': sorted(set(self.outputs)),
            'stage_seconds': self.stages,
            'exit_code': exit_code,
        }
        if extra:
            manifest.update(extra)
        write_json_file(os.path.join(self.output_dir, 'manifest.json'), manifest)
        AppSettings.logger.info(f"{OUR_NAME} {self.command} finished with exit code {exit_code} "
                                f"in {elapsed_milliseconds:,} milliseconds")
        return exit_code


def run_guarded(ctx: click.Context, recorder: RunRecorder, body: Callable[[], int],
                extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Runs <body>, mapping library errors onto exit codes. Partial outputs stay on disk.
    """
    try:
        exit_code = body()
    except (OSError, MeshError, BoundsError, TmopError, ValueError) as e:
        AppSettings.logger.critical(f"{OUR_NAME} {recorder.command} failed on its input: {e}\n"
                                    f"{traceback.format_exc()}")
        exit_code = EXIT_IO
    except (SolverError, BlendError) as e:
        AppSettings.logger.critical(f"{OUR_NAME} {recorder.command} solver failure: {e}\n{traceback.format_exc()}")
        exit_code = EXIT_SOLVER
    exit_code = recorder.finish(exit_code, extra)
    AppSettings.close_logger()  # flush queued CloudWatch entries
    ctx.exit(exit_code)


def common_options(func):
    options = [
        click.option('--config', type=click.Path(exists=True, dir_okay=False), default=None,
                     help='JSON or YAML file holding option values; flags given explicitly win.'),
        click.option('--output-dir', default=None, help='Where outputs and manifest.json are written.'),
        click.option('--order-quad', default=10, show_default=True, type=int, help='Initial quadrature order.'),
        click.option('--M', 'control_nodes', default=None, type=int,
                     help='Control nodes per direction for the bounds (default 2*(2p)).'),
        click.option('--max-depth', default=6, show_default=True, type=int, help='Maximum subdivision depth.'),
        click.option('--svg', is_flag=True, default=False, help='Also write SVG pictures.'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def solver_options(func):
    options = [
        click.option('--metric', default='mu2', show_default=True,
                     help='mu2, mu77, mu80:g, mu4, mu4sb, nu50 or nu49:g'),
        click.option('--validity', type=click.Choice(['bounds', 'samples']), default='bounds', show_default=True),
        click.option('--barrier', type=click.Choice(['bounds', 'samples']), default='bounds', show_default=True,
                     help='Untangling barrier from the certified bound or from quadrature samples.'),
        click.option('--mode', type=click.Choice(['bfgs', 'newton']), default='bfgs', show_default=True),
        click.option('--eps-conv', default=1.0e-10, show_default=True, type=float),
        click.option('--max-iters', default=200, show_default=True, type=int),
        click.option('--tangential-attrs', default='', help='Boundary attributes whose nodes may slide, e.g. 5,6'),
        click.option('--qrefine', is_flag=True, default=False, help='Raise quadrature order where needed.'),
        click.option('--eps-q', default=5.0, show_default=True, type=float),
        click.option('--max-quad-order', default=400, show_default=True, type=int),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.version_option(TOOL_VERSION)
def cli():
    """
    r-adaptivity of high-order quadrilateral meshes with certified validity.
    """


def _write_certificate_csv(path: str, certificate) -> None:
    write_csv_file(path, ('element', 'alpha_lb', 'alpha_qpmin', 'verdict', 'depth'),
                   ((c.element, c.certified_lower, c.sampled_min, c.verdict.value, c.depth_used)
                    for c in certificate.elements))


@cli.command()
@click.argument('mesh_path', type=click.Path())
@common_options
@click.pass_context
def check(ctx, mesh_path, **params):
    """
    Certifies the sign of det(A) on every element.
    """
    params = apply_config_file(ctx, dict(params, mesh_path=mesh_path))
    recorder = RunRecorder('check', params)

    def body() -> int:
        mesh = load_mesh(params['mesh_path'])
        recorder.stage('load')
        certificate = certify_mesh(mesh, params['control_nodes'], int(params['max_depth']),
                                   int(params['order_quad']))
        recorder.stage('certify')
        _write_certificate_csv(recorder.path('check.csv'), certificate)
        if params['svg']:
            save_svg(mesh, recorder.path('check.svg'), [c.certified_lower for c in certificate.elements])
        if certificate.inverted:
            AppSettings.logger.error(f"Inverted elements: {certificate.inverted}")
        if certificate.undecided:
            AppSettings.logger.warning(f"Undecided elements at depth {params['max_depth']}: {certificate.undecided}")
        AppSettings.logger.info(f"Lower bound {certificate.alpha_lower:.6e}, sampled minimum "
                                f"{certificate.sampled_min:.6e}, verdict {certificate.verdict.value}")
        return VERDICT_EXIT_CODES[certificate.verdict]

    run_guarded(ctx, recorder, body)


def _run_solver(ctx, command: str, mesh_path: str, params: Dict[str, Any]) -> None:
    params = apply_config_file(ctx, dict(params, mesh_path=mesh_path))
    recorder = RunRecorder(command, params)
    results: Dict[str, Any] = {}

    def body() -> int:
        config = solver_config(params)
        results['solver'] = config.to_dict()
        mesh = load_mesh(params['mesh_path'])
        recorder.stage('load')
        if params['svg']:
            save_svg(mesh, recorder.path('before.svg'))
        target = ideal_shape_target(mesh)
        results['target_size'] = target.zeta
        if command == 'untangle' or params.get('untangle_first'):
            untangler = MeshOptimizer(mesh, parse_metric('mu4'), target, config)
            try:
                mesh, _ = untangler.untangle()
            finally:
                untangler.trace.write_csv(recorder.path('untangle_trace.csv'))
            recorder.stage('untangle')
        if command == 'optimize':
            optimizer = MeshOptimizer(mesh, parse_metric(params['metric']), target, config)
            try:
                mesh, trace = optimizer.optimize()
            finally:
                optimizer.trace.write_csv(recorder.path('optimize_trace.csv'))
                results['final_quad_orders'] = [int(q) for q in optimizer.quad_orders]
            recorder.stage('optimize')
            results['stop_reason'] = trace.stop_reason
        save_mesh(mesh, recorder.path('optimized.json' if command == 'optimize' else 'untangled.json'))
        certificate = certify_mesh(mesh, config.control_nodes, config.max_depth, config.quad_order)
        _write_certificate_csv(recorder.path('final_check.csv'), certificate)
        if params['svg']:
            save_svg(mesh, recorder.path('after.svg'), [c.certified_lower for c in certificate.elements])
        recorder.stage('report')
        return VERDICT_EXIT_CODES[certificate.verdict]

    run_guarded(ctx, recorder, body, results)


@cli.command()
@click.argument('mesh_path', type=click.Path())
@common_options
@solver_options
@click.option('--untangle-first', is_flag=True, default=False, help='Untangle before optimizing.')
@click.pass_context
def optimize(ctx, mesh_path, **params):
    """
    Moves nodes to minimize the chosen quality metric while keeping the mesh valid.
    """
    _run_solver(ctx, 'optimize', mesh_path, params)


@cli.command()
@click.argument('mesh_path', type=click.Path())
@common_options
@solver_options
@click.pass_context
def untangle(ctx, mesh_path, **params):
    """
    Untangles a mesh with a shifted barrier until it is valid (certified, or at the
        quadrature points with --validity samples).
    """
    _run_solver(ctx, 'untangle', mesh_path, params)


@cli.command()
@click.option('--p', 'degree', type=int, default=None, help='Polynomial degree (default: number of coefficients - 1).')
@click.option('--coeffs', default=None, help='Comma-separated GLL nodal values.')
@click.option('--coeffs-file', type=click.Path(exists=True, dir_okay=False), default=None,
              help='CSV holding the nodal values (first row used).')
@common_options
@click.pass_context
def bounds(ctx, degree, coeffs, coeffs_file, **params):
    """
    Piecewise-linear bounds of a 1D polynomial given by its GLL nodal values.
    """
    params = apply_config_file(ctx, dict(params, degree=degree, coeffs=coeffs, coeffs_file=coeffs_file))
    recorder = RunRecorder('bounds', params)
    results: Dict[str, Any] = {}

    def body() -> int:
        if params['coeffs_file']:
            values = np.array(read_csv_floats(params['coeffs_file'])[0])
        elif params['coeffs']:
            text = params['coeffs']
            values = np.array(text if isinstance(text, list) else [float(v) for v in str(text).split(',')],
                              dtype=float)
        else:
            raise ValueError("Give either --coeffs or --coeffs-file")
        p = params['degree'] if params['degree'] is not None else len(values) - 1
        if len(values) != p + 1:
            raise ValueError(f"{len(values)} values do not match degree {p}")
        m = params['control_nodes'] or 2 * (p + 1)
        table = build_bound_table(p, m)
        bound = bound_function_1d(table, values)
        results.update(control_nodes=m, min_lower=float(bound.min_lower), max_upper=float(bound.max_upper),
                       mean_gap=float(bound.mean_gap))
        recorder.stage('bound')
        write_csv_file(recorder.path('bounds_control.csv'), ('j', 'eta', 'lower', 'upper'),
                       ((j, float(eta), float(lo), float(hi)) for j, (eta, lo, hi)
                        in enumerate(zip(bound.control_nodes, bound.lower, bound.upper))))
        x = np.linspace(-1.0, 1.0, BOUNDS_SAMPLES)
        u = lagrange_eval(gll_nodes(p), x) @ values
        write_csv_file(recorder.path('bounds_samples.csv'), ('x', 'u', 'lower', 'upper'),
                       ((float(a), float(b), float(c), float(d))
                        for a, b, c, d in zip(x, u, bound.lower_at(x), bound.upper_at(x))))
        AppSettings.logger.info(f"p={p} M={m}: lower {bound.min_lower:.6f}, upper {bound.max_upper:.6f}, "
                                f"mean gap {bound.mean_gap:.6f}, Bernstein lower "
                                f"{bernstein_lower_bound(values, p):.6f}")
        return EXIT_OK

    run_guarded(ctx, recorder, body, results)


@cli.command()
@click.argument('mesh_path', type=click.Path())
@click.argument('points_path', type=click.Path())
@click.option('--tangential-attrs', default='', help='Boundary attributes to project onto (default: all).')
@click.option('--output-dir', default=None)
@click.option('--config', type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def project(ctx, mesh_path, points_path, **params):
    """
    Closest points on the mesh boundary for each point of a CSV file.
    """
    params = apply_config_file(ctx, dict(params, mesh_path=mesh_path, points_path=points_path))
    recorder = RunRecorder('project', params)

    def body() -> int:
        mesh = load_mesh(params['mesh_path'])
        attrs = parse_attrs(params['tangential_attrs']) or sorted({b.attr for b in mesh.boundary})
        curve = extract_boundary(mesh, attrs)
        rows = []
        for k, point in enumerate(read_csv_floats(params['points_path'])):
            result = closest_point(curve, point[:2])
            rows.append((k, float(point[0]), float(point[1]), float(result.point[0]), float(result.point[1]),
                         result.segment, float(result.t), float(result.residual)))
        write_csv_file(recorder.path('projections.csv'),
                       ('index', 'x', 'y', 'px', 'py', 'segment', 't', 'residual'), rows)
        recorder.stage('project')
        return EXIT_OK

    run_guarded(ctx, recorder, body)


if __name__ == '__main__':
    cli()
