"""vestido: pose-guided virtual try-on with latent diffusion, in numpy."""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import click
import typer

if TYPE_CHECKING:
    from vestido.config import RunConfig

__version__ = "0.1.0"

# Set before numpy's BLAS is first loaded.
_THREAD_VARIABLES = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

cli = typer.Typer(
    name="vestido",
    help="Pose-guided virtual try-on with latent diffusion on synthetic sprites",
    add_completion=False,
    no_args_is_help=True,
)
config_cli = typer.Typer(help="Create or inspect configuration files", no_args_is_help=True)
cli.add_typer(config_cli, name="config")


@dataclass
class GlobalOptions:
    config: Path | None = None
    preset: str | None = None
    seed: int | None = None
    out: Path | None = None
    threads: int | None = None
    quiet: bool = False

    def load(self) -> RunConfig:
        """Effective configuration: preset, then file, then command-line flags."""
        from vestido.config import load_config

        config = load_config(self.config, self.preset)
        if self.seed is not None:
            config.run.seed = self.seed
        if self.out is not None:
            config.run.out = str(self.out)
        if self.threads is not None:
            config.run.threads = self.threads
        return config

    @property
    def progress(self) -> bool:
        return not self.quiet and sys.stderr.isatty()


def _options(ctx: typer.Context) -> GlobalOptions:
    return ctx.ensure_object(GlobalOptions)


@cli.callback()
def run(
    ctx: typer.Context,
    config: Path | None = typer.Option(
        None, "--config", "-c", help="TOML config layered on top of the preset"
    ),
    preset: str | None = typer.Option(
        None, "--preset", "-p", help="Base preset: desk, paper, smoke or overfit"
    ),
    seed: int | None = typer.Option(None, "--seed", min=0, help="Global seed"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Run output directory"),
    threads: int | None = typer.Option(
        None,
        "--threads",
        min=1,
        help="BLAS threads (more than 1 voids bit-exact reproducibility)",
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug messages"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Hide progress bars"),
) -> None:
    """Stage-wise training, sampling and evaluation of the try-on model."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if threads is not None:
        for name in _THREAD_VARIABLES:
            os.environ[name] = str(threads)
    ctx.obj = GlobalOptions(config, preset, seed, out, threads, quiet)


@cli.command("gen-data")
def gen_data(ctx: typer.Context) -> None:
    """Render the synthetic triplet dataset."""
    from vestido.commands import cmd_gen_data

    options = _options(ctx)
    cmd_gen_data(options.load(), progress=options.progress)


@cli.command("train-vae")
def train_vae(
    ctx: typer.Context,
    resume: bool = typer.Option(False, "--resume", help="Continue from the saved checkpoint"),
) -> None:
    """Train the image autoencoder (stage one)."""
    from vestido.commands import cmd_train_vae

    options = _options(ctx)
    cmd_train_vae(options.load(), resume=resume, progress=options.progress)


@cli.command()
def train(
    ctx: typer.Context,
    resume: bool = typer.Option(False, "--resume", help="Continue from the saved checkpoint"),
) -> None:
    """Train the try-on model against the frozen autoencoder (stage two)."""
    from vestido.commands import cmd_train

    options = _options(ctx)
    cmd_train(options.load(), resume=resume, progress=options.progress)


@cli.command("sample")
def sample_command(
    ctx: typer.Context,
    index: int = typer.Option(0, "--index", "-i", min=0, help="Dataset entry to condition on"),
    source: str | None = typer.Option(
        None, "--source", help="Source person: entry index or 64×64 PNG (default: --index)"
    ),
    pose: str | None = typer.Option(
        None, "--pose", help="Target pose: entry index or JSON keypoint file (default: --index)"
    ),
    garment: str | None = typer.Option(
        None, "--garment", help="Garment: entry index or 64×64 PNG (default: --index)"
    ),
    seed: int | None = typer.Option(None, "--sample-seed", help="Seed for this sample only"),
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Try-on checkpoint"),
    w_pose: float | None = typer.Option(None, "--w-pose", help="Pose guidance weight"),
    w_app: float | None = typer.Option(None, "--w-app", help="Appearance guidance weight"),
    w_garment: float | None = typer.Option(None, "--w-garment", help="Garment guidance weight"),
    dest: Path | None = typer.Option(None, "--dest", help="Directory for the PNG files"),
) -> None:
    """Sample a try-on image and a four-panel grid.

    Each of --source, --pose and --garment takes a dataset index or a file,
    so a person can be paired with another entry's garment.
    """
    from vestido.commands import cmd_sample
    from vestido.diffusion import GuidanceWeights

    options = _options(ctx)
    config = options.load()
    overrides = {
        key: value
        for key, value in (("w_pose", w_pose), ("w_app", w_app), ("w_garment", w_garment))
        if value is not None
    }
    weights = GuidanceWeights(**{**config.guidance.to_dict(), **overrides})
    cmd_sample(
        config,
        checkpoint,
        index,
        weights,
        dest,
        progress=options.progress,
        source=source,
        pose=pose,
        garment=garment,
        seed=seed,
    )


@cli.command("eval")
def eval_command(
    ctx: typer.Context,
    split: str = typer.Option("test", "--split", help="train, val, test or unseen"),
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Try-on checkpoint"),
) -> None:
    """Score samples of a split against ground truth (SSIM, PSNR, torso match, Fréchet)."""
    from vestido.commands import cmd_eval

    options = _options(ctx)
    cmd_eval(options.load(), checkpoint, split, progress=options.progress)


@cli.command()
def ablate(
    ctx: typer.Context,
    mode: list[str] | None = typer.Option(
        None,
        "--mode",
        "-m",
        help="app-only, app-2x, garment-only, garment-2x, both or gray-mask (repeatable; default all)",
    ),
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Try-on checkpoint"),
) -> None:
    """Compare appearance-bias variants and torso gray masking on the probe set."""
    from vestido.commands import ABLATION_MODES, cmd_ablate

    options = _options(ctx)
    cmd_ablate(options.load(), checkpoint, mode or ABLATION_MODES, progress=options.progress)


@cli.command()
def probe(
    ctx: typer.Context,
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Try-on checkpoint"),
) -> None:
    """Garment guidance vs no garment guidance on held-out garment colors."""
    from vestido.commands import cmd_probe

    options = _options(ctx)
    cmd_probe(options.load(), checkpoint, progress=options.progress)


@config_cli.command("init")
def config_init(
    path: Path = typer.Argument(Path("vestido.toml"), help="Where to write the template"),
    force: bool = typer.Option(False, "--force", help="Overwrite an existing file"),
) -> None:
    """Write the commented default configuration."""
    from vestido.config import write_default_config

    typer.echo(f"Wrote {write_default_config(path, overwrite=force)}")


@config_cli.command("show")
def config_show(ctx: typer.Context) -> None:
    """Print the effective configuration as TOML."""
    typer.echo(_options(ctx).load().to_toml(), nl=False)


def main() -> None:
    """Entry point for the CLI."""
    from vestido.errors import VestidoError

    try:
        cli(standalone_mode=False)
    except VestidoError as e:
        typer.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)
    except IndexError as e:
        typer.echo(f"error: {e}", err=True)
        sys.exit(3)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except click.Abort:
        sys.exit(130)


if __name__ == "__main__":
    main()
