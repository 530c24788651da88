"""Prepara o ambiente virtual e executa a linha de comando DeskSeg.

Uso: ``python DeskSeg-Start.py <subcomando> [opções]`` (mesmas opções de ``python -m app.main``).
"""

from __future__ import annotations

import contextlib
import importlib
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

ROOT_DIR = Path(__file__).resolve().parent
LOGS_DIR = ROOT_DIR / "logs"
VENV_DIR = ROOT_DIR / ".venv"
REQUIREMENTS_FILE = ROOT_DIR / "requirements.txt"
REQUIRED_MODULES = ("numpy",)

MANUAL_INSTALL_HINT = (
    "Para tentar novamente manualmente:\n"
    "  1. Ative o ambiente: '.venv\\Scripts\\activate' (Windows) ou 'source .venv/bin/activate'.\n"
    "  2. Execute 'python -m pip install -r requirements.txt'.\n"
    "  3. Rode novamente o DeskSeg-Start."
)


@dataclass
class DependencyInstallationError(RuntimeError):
    message: str
    log_path: Path
    details: str = ""

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        base = self.message
        if self.details:
            base = f"{base}\n\n{self.details}"
        return f"{base}\n\nArquivo de log: {self.log_path}"


def _missing_modules(modules: Iterable[str]) -> list[str]:
    missing: list[str] = []
    for module in modules:
        try:
            importlib.import_module(module)
        except ModuleNotFoundError:
            missing.append(module)
    return missing


def _venv_python_path() -> Path:
    if os.name == "nt":
        return VENV_DIR / "Scripts" / "python.exe"
    return VENV_DIR / "bin" / "python"


def _running_inside_venv() -> bool:
    return Path(sys.prefix).resolve() == VENV_DIR.resolve()


def _write_install_log(log_path: Path, command: list[str], lines: list[str], returncode: Optional[int]) -> None:
    quoted = " ".join(f'"{part}"' if " " in str(part) else str(part) for part in command)
    header = [
        f"Comando: {quoted}",
        f"Código de saída: {'' if returncode is None else returncode}",
        "--- STDOUT/STDERR ---",
    ]
    with contextlib.suppress(OSError):
        log_path.write_text("\n".join(header) + "\n" + "".join(lines), encoding="utf-8")


def _run_logged(command: list[str], log_path: Path) -> int:
    LOGS_DIR.mkdir(parents=True, exist_ok=True)
    env = os.environ.copy()
    env.setdefault("PYTHONUNBUFFERED", "1")
    lines: list[str] = []
    # Security: command built from trusted paths (sys.executable, venv and requirements file)
    with subprocess.Popen(command, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, bufsize=1, env=env) as process:
        assert process.stdout is not None
        for raw_line in process.stdout:
            sys.stdout.write(raw_line)
            lines.append(raw_line)
        returncode = process.wait()
    _write_install_log(log_path, command, lines, returncode)
    return returncode


def _ensure_virtualenv() -> Path:
    venv_python = _venv_python_path()
    if venv_python.exists():
        return venv_python
    log_path = LOGS_DIR / "startup-venv.log"
    if _run_logged([sys.executable, "-m", "venv", str(VENV_DIR)], log_path) != 0:
        raise DependencyInstallationError("Não foi possível criar o ambiente virtual .venv.", log_path)
    if not venv_python.exists():
        raise DependencyInstallationError("Ambiente virtual criado, mas o interpretador não foi localizado.", log_path)
    return venv_python


def ensure_dependencies(python_executable: Path) -> None:
    missing = _missing_modules(REQUIRED_MODULES)
    if not missing:
        return
    print("Dependências ausentes: " + ", ".join(missing), flush=True)
    log_path = LOGS_DIR / "startup-install.log"
    command = [str(python_executable), "-m", "pip", "install", "-r", str(REQUIREMENTS_FILE)]
    if _run_logged(command, log_path) != 0:
        raise DependencyInstallationError("Falha ao instalar dependências automaticamente.", log_path, MANUAL_INSTALL_HINT)
    importlib.invalidate_caches()
    if still_missing := _missing_modules(REQUIRED_MODULES):
        raise DependencyInstallationError(
            "Dependências continuam ausentes após a instalação automática:",
            log_path,
            ", ".join(still_missing) + "\n\n" + MANUAL_INSTALL_HINT,
        )


def main() -> int:
    try:
        venv_python = _ensure_virtualenv()
    except DependencyInstallationError as exc:
        print(exc, file=sys.stderr)
        return 1

    if not _running_inside_venv():
        try:
            os.execv(str(venv_python), [str(venv_python), str(ROOT_DIR / "DeskSeg-Start.py"), *sys.argv[1:]])
        except OSError as exc:  # pragma: no cover - exec failure
            print(f"Não foi possível reiniciar dentro do ambiente virtual: {exc}", file=sys.stderr)
            return 1
        return 0  # os.execv não retorna

    try:
        ensure_dependencies(Path(sys.executable))
    except DependencyInstallationError as exc:
        print(exc, file=sys.stderr)
        return 1

    from app import main as app_main

    return app_main()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
