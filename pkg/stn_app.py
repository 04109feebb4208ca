from dotenv import load_dotenv

load_dotenv()

from stnforecast.cli.commands import main  # noqa: E402

if __name__ == "__main__":
    main()
