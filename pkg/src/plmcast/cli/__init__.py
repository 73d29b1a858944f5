import typer

from plmcast.cli import commands
from plmcast.config import get_settings
from plmcast.helpers import configure_logging

app = typer.Typer(help="Dual-branch forecasting with a frozen language-model backbone.")
app.command()(commands.describe)
app.command()(commands.train)
app.command("eval")(commands.evaluate)
app.command()(commands.ablate)
app.command()(commands.sensitivity)
app.command()(commands.analyze)


@app.callback()
def main() -> None:
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)
