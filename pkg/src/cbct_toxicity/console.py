from typing import Any, Dict

import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from cbct_toxicity.common import Columns
from cbct_toxicity.evalx.metrics import EvolutionTable

console = Console(stderr=True)


def _percent(value: float) -> str:
    return "-" if pd.isna(value) else f"{100 * value:.1f}%"


def show_gradcheck(results: pd.DataFrame):
    table = Table(title="Gradient check")
    table.add_column("Layer", style="bold")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Status")
    for row_dict in results.to_dict("records"):
        passed = bool(row_dict[Columns.PASSED])
        table.add_row(
            row_dict[Columns.LAYER],
            f"{row_dict[Columns.MAX_REL_ERROR]:.3e}",
            "[green]pass[/green]" if passed else "[red]FAIL[/red]",
        )
    console.print(table)


def show_ablation(aggregate: pd.DataFrame, title: str = "Branch ablation"):
    table = Table(title=title)
    table.add_column("Combination", style="bold")
    table.add_column("bAcc", justify="right")
    table.add_column("Sensitivity", justify="right")
    table.add_column("Specificity", justify="right")
    for row in aggregate.to_dict("records"):
        table.add_row(
            str(row[Columns.COMBINATION]),
            f"{_percent(row[Columns.BACC_MEAN])} ± {_percent(row[Columns.BACC_STD])}",
            f"{_percent(row[Columns.SENS_MEAN])} ± {_percent(row[Columns.SENS_STD])}",
            f"{_percent(row[Columns.SPEC_MEAN])} ± {_percent(row[Columns.SPEC_STD])}",
        )
    console.print(table)


def show_evolution(evolution: EvolutionTable):
    table = Table(title=f"Risk evolution ({evolution.target})")
    table.add_column("Fraction", justify="right", style="bold")
    table.add_column("bAcc", justify="right")
    for t, mean, std in zip(evolution.fractions, evolution.bacc_mean, evolution.bacc_std):
        table.add_row(str(t), f"{_percent(mean)} ± {_percent(std)}")
    console.print(table)
    if pd.isna(evolution.r2):
        console.print("[yellow]Too few fractions for a linear fit[/yellow]")
        return
    verdict = (
        "[green]correlated[/green]" if evolution.correlated else "[yellow]no correlation[/yellow]"
    )
    console.print(f"slope {evolution.slope:.4f}/fraction, r² {evolution.r2:.3f}: {verdict}")


def show_summary(title: str, values: Dict[str, Any]):
    table = Table(show_header=False, box=None, padding=(0, 2))
    table.add_column(style="bold")
    table.add_column()
    for key, value in values.items():
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        table.add_row(key, text)
    console.print(Panel(table, title=f"[bold]{title}[/bold]", border_style="cyan"))
