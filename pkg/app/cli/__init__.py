from .run_config import AblationConfig, EvalConfig, RunConfig
from .commands import (
    cmd_ablate_order, cmd_eval, cmd_gen_data, cmd_report, cmd_train_wsod, cmd_warmup, check_order_trends,
)
