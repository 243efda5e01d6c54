# RADAPT Run Settings

from os import getenv

# NOTE: These are read once at program start-up from environment variables

# Gets (optional) RADAPT_PREFIX environment variable -- set to 'dev-' for development
prefix = getenv('RADAPT_PREFIX', '')

debug_mode_flag = getenv('DEBUG_MODE', '')

# CloudWatch logging is opt-in here (the tool is mostly run from a desk)
use_watchtower = getenv('USE_WATCHTOWER', '')

# Get the Graphite host from the environment, otherwise use a local test instance
graphite_url = getenv('GRAPHITE_HOSTNAME', 'localhost')
stats_prefix = f"radapt.{'dev' if prefix else 'prod'}"

TOOL_VERSION = '0.3.0'
