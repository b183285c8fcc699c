from fastapi import FastAPI
from fastapi.responses import JSONResponse
from contextlib import asynccontextmanager
from typing import List, Optional
from core.settings import settings
from core.exceptions import DomainAdaptError
from core.middleware import setup_middleware
from core.tensor import set_default_precision
from apps.serving.routes import router as serving_router
from apps.serving.service import translation_service
import argparse
import logging
import sys

logging.basicConfig(
    level=settings.logging_level,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting application...")
    if settings.serve_run_dir:
        try:
            translation_service.load(settings.serve_run_dir)
        except DomainAdaptError as e:
            logger.error(f"Could not load run {settings.serve_run_dir}: {e.describe()}")
    else:
        logger.warning("SERVE_RUN_DIR is not set - translation endpoints will return 503")
    logger.info("Application started")
    yield
    translation_service.unload()
    logger.info("Shutting down application...")


app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    description="Domain adaptation NMT: translate and score with a trained run",
    lifespan=lifespan,
)

setup_middleware(app)

app.include_router(serving_router)


@app.get("/")
async def root():
    return {
        "name": settings.app_name,
        "version": settings.app_version,
        "status": "running",
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy", "run_loaded": translation_service.is_loaded}


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error(f"Unhandled exception: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal server error"},
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manage.py", description="Domain adaptation NMT experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment INI file")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", default=None, help="output directory (data dir for synth-data, run dir otherwise)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--precision", type=int, choices=(32, 64), default=None)

    commands.add_parser("synth-data", parents=[common], help="generate the synthetic corpora")
    commands.add_parser("prepare", parents=[common], help="learn subwords and vocabularies, write training data")
    commands.add_parser("train", parents=[common], help="run every stage of the configured strategy")
    adapt = commands.add_parser("adapt", parents=[common], help="resume a two-stage strategy from a parent checkpoint")
    adapt.add_argument("--parent", required=True, help="parent checkpoint file")
    translate = commands.add_parser("translate", parents=[common], help="translate a file or every test set")
    translate.add_argument("--input", default=None)
    translate.add_argument("--output", default=None)
    translate.add_argument("--corpus", default=None, help="corpus whose tag/group context to decode with")
    translate.add_argument("--checkpoint", default=None, help="decode with this checkpoint instead of the average")

    evaluate = commands.add_parser("evaluate", help="BLEU of a hypothesis file against a reference file")
    evaluate.add_argument("hypotheses")
    evaluate.add_argument("references")

    report = commands.add_parser("report", help="aggregate test BLEU over run directories")
    report.add_argument("runs", nargs="+")
    report.add_argument("--output", default=None)

    serve = commands.add_parser("serve", help="serve a trained run over HTTP")
    serve.add_argument("--run", default=None, help="run directory (defaults to SERVE_RUN_DIR)")
    return parser


def run_command(args: argparse.Namespace) -> None:
    from apps.experiments import service
    from apps.experiments.config import load_config

    if args.command == "evaluate":
        print(service.cmd_evaluate(args.hypotheses, args.references))
        return
    if args.command == "report":
        sys.stdout.write(service.cmd_report(args.runs, args.output))
        return
    if args.command == "serve":
        import uvicorn

        if args.run:
            settings.serve_run_dir = args.run
        uvicorn.run(app, host=settings.host, port=settings.port)
        return

    if args.precision is not None:
        set_default_precision(args.precision)
    config = load_config(args.config)
    if args.command == "synth-data":
        print(service.cmd_synth_data(config, args.out, args.seed, args.force))
    elif args.command == "prepare":
        changed = service.cmd_prepare(config, args.out, args.seed, args.force)
        print("prepared" if changed else "up to date")
    elif args.command == "train":
        manifest = service.cmd_train(config, args.out, args.seed)
        print(f"{manifest.label}: {', '.join(s.name for s in manifest.stages)}")
    elif args.command == "adapt":
        manifest = service.cmd_adapt(config, args.parent, args.out, args.seed)
        print(f"{manifest.label}: {', '.join(s.name for s in manifest.stages)}")
    elif args.command == "translate":
        for path in service.cmd_translate(
            config, args.out, args.seed, args.input, args.output, args.corpus, args.checkpoint
        ):
            print(path)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_command(args)
    except DomainAdaptError as e:
        logger.error(f"{args.command} failed: {e}")
        print(e.describe(), file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
