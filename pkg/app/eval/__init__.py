from .ap import AP_MODES, ApResult, average_precision, evaluate_detections, mean_ap
from .tide import ERROR_TYPES, ErrorBreakdown, tide_dataset, tide_decompose
from .report import read_csv, write_ablation_csv, write_ap_csv, write_csv, write_stage_csv, write_tide_csv
from .charts import ablation_chart, error_chart, stage_map_chart
