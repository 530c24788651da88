"""Ponto de entrada da linha de comando DeskSeg.

Guia de edição (resumido)
- Modificável pelo usuário:
    - Valores padrão das opções (preferir `data/run_settings.json` e `--set`).
- Requer atenção:
    - Códigos de saída (0 sucesso, 1 falha em execução, 2 erro de configuração)
      são usados por scripts e testes.
- Apenas para devs:
    - Novos subcomandos e a ligação com `PipelineService`/`AblationRunner`.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from data import telemetry
from data.errors import ConfigError, DeskSegError
from data.run_settings import RunConfig, apply_overrides, load_run_config
from data.runtime_log import configure_stdio, log_event

from .ablation import AXES, AblationRunner
from .constants import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK
from .log_manager import LogManager
from .pipeline_service import ConvertRequest, PipelineService, parse_axes


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Arquivo JSON de configuração da execução.")
    common.add_argument("--seed", type=int, default=None, help="Semente mestre (substitui 'seed').")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="CHAVE=VALOR",
        help="Sobrescreve uma chave pontilhada da configuração (repetível).",
    )
    common.add_argument("--out", type=Path, default=None, help="Diretório de saída (substitui 'output_dir').")

    parser = argparse.ArgumentParser(
        prog="deskseg",
        description="Segmentação semântica de nuvens LiDAR em dois estágios (pré-treino misto + ajuste fino).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    convert = sub.add_parser("convert", parents=[common], help="Ingere um diretório KITTI no layout do registro.")
    convert.add_argument("source", type=Path)
    convert.add_argument("--name", required=True)
    convert.add_argument("--label-map", default="semantic_kitti", help="Mapa embutido ou caminho .json.")
    convert.add_argument("--channels", type=int, default=4, choices=(4, 5))
    convert.add_argument("--val-fraction", type=float, default=0.2)
    convert.add_argument("--target", action="store_true", help="Marca o dataset como domínio alvo.")

    bench = sub.add_parser("bench", parents=[common], help="Gera o benchmark sintético de três domínios.")
    bench.add_argument("--scans-per-source", type=int, default=None)

    sub.add_parser("pretrain", parents=[common], help="Pré-treino na mistura de datasets.")

    finetune = sub.add_parser("finetune", parents=[common], help="Ajuste fino no dataset alvo.")
    finetune.add_argument("--checkpoint", type=Path, default=None)
    finetune.add_argument("--from-scratch", action="store_true", help="Treina só no alvo, sem checkpoint.")

    evaluate = sub.add_parser("eval", parents=[common], help="Avalia um checkpoint.")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", default=None, help="Dataset do registro (padrão: alvo).")
    evaluate.add_argument("--split", default="val", choices=("train", "val"))

    ablate = sub.add_parser("ablate", parents=[common], help="Roda as grades de ablação.")
    ablate.add_argument("--axes", default=",".join(AXES), help=f"Subconjunto de {','.join(AXES)}.")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = str(args.out)
    return config.validate()


# ----------------------------------------------------------------------
# Comandos
# ----------------------------------------------------------------------
def cmd_convert(args: argparse.Namespace, config: RunConfig) -> int:
    request = ConvertRequest(
        source=args.source,
        name=args.name,
        label_map=args.label_map,
        channels=args.channels,
        val_fraction=args.val_fraction,
        target=args.target,
    )
    path = PipelineService(config).convert(request)
    print(f"Registro atualizado: {path}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    path = PipelineService(config).bench(args.out, scans_per_source=args.scans_per_source)
    print(f"Benchmark gravado; registro em {path}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace, config: RunConfig) -> int:
    outcome = PipelineService(config).pretrain()
    print(f"Checkpoint: {outcome.result.checkpoint}")
    if outcome.metrics is not None:
        print(f"Validação alvo: mIoU {100 * outcome.metrics.miou:.2f} | Acc {100 * outcome.metrics.acc:.2f}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> int:
    outcome = PipelineService(config).finetune(checkpoint=args.checkpoint, from_scratch=args.from_scratch)
    print(f"Checkpoint: {outcome.result.checkpoint}")
    if outcome.metrics is not None:
        print(f"Validação alvo: mIoU {100 * outcome.metrics.miou:.2f} | Acc {100 * outcome.metrics.acc:.2f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    _, summary = PipelineService(config).evaluate(args.checkpoint, dataset=args.dataset, split=args.split)
    print(summary)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    axes = parse_axes(args.axes, AXES)
    report = AblationRunner(config, out_dir=Path(config.output_dir)).run(axes)
    print(report)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "convert": cmd_convert,
    "bench": cmd_bench,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _report_log_health(manager: LogManager) -> None:
    for message in manager.failures:
        log_event(message, level="warning")
    if manager.dropped_lines:
        log_event(f"{manager.dropped_lines} linha(s) fora do arquivo de log desta sessão.", level="warning")


def run(argv: Optional[Sequence[str]] = None, *, log_manager: Optional[LogManager] = None) -> int:
    """Executa um subcomando e devolve o código de saída."""

    args = build_parser().parse_args(argv)
    manager = log_manager or LogManager()
    manager.start_session(args.command)
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        log_event(f"Erro de configuração: {exc}", level="error")
        telemetry.record_event("config_error", {"command": args.command, "message": str(exc)})
        return EXIT_CONFIG
    except (DeskSegError, OSError) as exc:
        log_event(f"Falha em '{args.command}': {exc}", level="error")
        return EXIT_FAILURE
    finally:
        if log_manager is None:
            manager.shutdown()
        else:
            manager.end_session()
        _report_log_health(manager)


def main() -> int:
    configure_stdio()
    return run()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
