"""Message-passing simulation of split training across clients, grid stations and a provider."""

from .bus import InProcessBus, MessageAudit
from .messages import MessageKind, PartyId, PartyMessage, Role, decode_frame, encode_frame
from .parties import ClientData, Split1Trace, average_client_gradients
from .training import (
    ClientSelection,
    EpochRecord,
    Federation,
    TrainedModels,
    TrainPlan,
    TrainResult,
    TrainingStrategy,
    initial_models,
    predict,
    predict_windows,
    prepare_clients,
    run_training,
    select_clients,
    split_mse,
)
