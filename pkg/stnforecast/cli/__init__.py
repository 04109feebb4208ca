from stnforecast.cli.commands import cli, main
from stnforecast.cli.run_config import RunConfig, load_run_config
