"""
Wiener Lab Run Log
Timestamped console + file logging shared by all lab scripts
"""

from datetime import datetime
from pathlib import Path

PROJECT_DIR = Path(__file__).parent
LOGS_DIR = PROJECT_DIR / 'logs'

# Log file
LOG_FILE = LOGS_DIR / 'lab.log'

QUIET = False


def log(message, level='INFO'):
    """Print and append one timestamped line to logs/lab.log."""
    timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    log_message = f"[{timestamp}] [{level}] {message}"
    if not QUIET:
        print(log_message)

    try:
        LOGS_DIR.mkdir(exist_ok=True)
        with open(LOG_FILE, 'a', encoding='utf-8') as f:
            f.write(log_message + '\n')
    except OSError:
        # read-only checkout: console only
        pass


def banner(title, level='INFO'):
    """Log a title between two 60-character rules."""
    log("=" * 60, level)
    log(title, level)
    log("=" * 60, level)
