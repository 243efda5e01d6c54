import logging
import os
import sys
from typing import Any, Dict, Optional

from run_settings import debug_mode_flag, use_watchtower

LOG_FORMAT = '%(asctime)s - %(levelname)s: %(message)s'
# Chatty third-party loggers that only get to report errors
QUIET_LOGGERS = ('boto3', 'botocore', 'urllib3')


def resetable(cls):
    """
    Snapshots the class dictionary so that reset_class() can restore it later.
    """
    cls._resetable_cache_ = dict(cls.__dict__)
    return cls


def reset_class(cls) -> None:
    snapshot: Dict[str, Any] = cls._resetable_cache_  # AttributeError if the class wasn't decorated
    for key in [k for k in cls.__dict__ if k not in snapshot and k != '_resetable_cache_']:
        delattr(cls, key)
    for key, value in snapshot.items():
        if key == '_resetable_cache_':
            continue
        try:
            setattr(cls, key, value)
        except (AttributeError, TypeError):  # __dict__, __weakref__ and friends
            continue
    cls.dirty = False


def setup_logger(logger: logging.Logger, watchtower_log_handler: Optional[logging.Handler], level: int) -> None:
    """
    Points <logger> at stdout (plus CloudWatch when a handler is given) at <level>.

    Existing handlers are dropped first so that re-initialising AppSettings
        never duplicates log lines.
    """
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(stream_handler)
    if watchtower_log_handler:
        logger.addHandler(watchtower_log_handler)
    logger.setLevel(level)
    logger.propagate = False
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.ERROR)


def make_watchtower_handler(log_group_name: str, stream_name: str, aws_access_key_id: str,
                            aws_secret_access_key: Optional[str], aws_region_name: str) -> logging.Handler:
    """
    CloudWatch handler for <log_group_name>.

    boto3 and watchtower are only imported when CloudWatch logging is wanted.
    """
    import boto3
    import watchtower
    logs_client = boto3.client('logs', aws_access_key_id=aws_access_key_id,
                               aws_secret_access_key=aws_secret_access_key, region_name=aws_region_name)
    return watchtower.CloudWatchLogHandler(boto3_client=logs_client, use_queues=False,
                                           log_group_name=log_group_name, stream_name=stream_name)


@resetable
class AppSettings:
    """
    Process-wide settings of the radapt tool: where results go, how many
        certification threads to use, and the shared logger.

    Set values with AppSettings(var=value); unknown names are ignored.
    """
    _resetable_cache_: Dict[str, Any] = {}
    name = 'HO-Mesh-Radapt'  # logger name and CloudWatch stream
    dirty = False

    prefix = ''  # 'dev-' for development runs, '' for production
    prefixable_vars = ['name']

    output_dir = os.getenv('RADAPT_OUTPUT_DIR', 'radapt_output')
    worker_count = max(1, int(os.getenv('RADAPT_WORKERS', '1')))

    aws_region_name = os.getenv('AWS_REGION', 'us-west-2')
    aws_access_key_id = os.getenv('AWS_ACCESS_KEY_ID', None)
    aws_secret_access_key = os.getenv('AWS_SECRET_ACCESS_KEY', None)

    logger = logging.getLogger(name)
    watchtower_log_handler: Optional[logging.Handler] = None

    def __init__(self, **kwargs):
        self.init(**kwargs)

    @classmethod
    def init(cls, reset: bool = True, **kwargs) -> None:
        if cls.dirty and reset:
            reset_class(AppSettings)
        if 'prefix' in kwargs and kwargs['prefix'] != cls.prefix:
            cls._apply_prefix(kwargs['prefix'])
        cls.set_vars(**kwargs)

        cls.watchtower_log_handler = None
        if use_watchtower and cls.aws_access_key_id:
            cls.watchtower_log_handler = make_watchtower_handler(cls.log_group_name(), cls.name,
                                                                 cls.aws_access_key_id,
                                                                 cls.aws_secret_access_key,
                                                                 cls.aws_region_name)
        setup_logger(cls.logger, cls.watchtower_log_handler, logging.DEBUG if debug_mode_flag else logging.INFO)
        if cls.watchtower_log_handler:
            cls.logger.debug(f"Logging to CloudWatch group '{cls.log_group_name()}' "
                             f"using key '…{cls.aws_access_key_id[-2:]}'")

    @classmethod
    def log_group_name(cls) -> str:
        """
        radapt, dev-radapt_DEBUG, radapt_TEST, ...
        """
        test_mode = bool(os.getenv('TEST_MODE', ''))
        return f"{'' if test_mode else cls.prefix}radapt" \
               f"{'_DEBUG' if debug_mode_flag else ''}{'_TEST' if test_mode else ''}"

    @classmethod
    def _apply_prefix(cls, prefix: str) -> None:
        for var in cls.prefixable_vars:
            setattr(AppSettings, var, prefix + getattr(AppSettings, var))
        cls.prefix = prefix
        cls.dirty = True

    @classmethod
    def set_vars(cls, **kwargs) -> None:
        for var, value in kwargs.items():
            if hasattr(AppSettings, var):
                setattr(AppSettings, var, value)
                cls.dirty = True

    @classmethod
    def close_logger(cls) -> None:
        # Sends any queued entries to CloudWatch
        if cls.watchtower_log_handler:
            cls.watchtower_log_handler.close()
