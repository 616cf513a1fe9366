from .proposals import GRID_SPEC, PROPOSAL_MODES, ProposalSet, generate_proposals, grid_proposals
from .heads import (
    Assignment, ScoreMatrices, mlc_loss, oicr_assign, refinement_loss, regression_loss, wsddn_scores,
)
from .casd import CasdTransform, attention_map, casd_iw_loss, casd_lw_loss, consistency_loss
from .model import WsodHyper, WsodModel, compute_targets, init_wsod, prepare_image, wsddn_forward, wsod_loss
from .train import train_wsod
from .infer import wsod_infer
from .checkpoint import load_wsod, save_wsod
