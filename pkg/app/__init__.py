"""Camada de aplicação do DeskSeg: linha de comando, coordenação de comandos e logs de sessão.

Guia de edição (resumido)
- Modificável pelo usuário:
	- Importações públicas referenciadas por scripts e pelo launcher.
- Requer atenção:
	- Alterações que mudem contratos públicos (ex.: `main`, `run`) podem quebrar scripts.
- Apenas para devs:
	- Refatorações internas e mudanças de API.
"""

from .main import main, run

__all__ = ["main", "run"]
