"""Multi-step power-system state forecasting with hand-differentiated GRU, BiGRU and Conv1D networks."""

from .cells import (
    BiGradSet,
    ConvParams,
    GradSet,
    GruParams,
    ReadoutParams,
    RnnParams,
    bigru_backward,
    bigru_forward,
    conv1d_backward,
    conv1d_forward,
    dropout_apply,
    gru_backward,
    gru_forward,
    gru_step,
    rnn_step,
)
from .linalg import ShapeError, activation, mode_product_quadratic
from .measurement import (
    GridTopology,
    MeasurementTensor,
    StateSeries,
    build_measurement_tensor,
    generate_state_series,
    measure,
    read_state_csv,
    write_state_csv,
)
from .metrics import EvalResult, evaluate, horizon_error_profile, nrmse, snapshot_error
from .model import Model, ModelConfig, build_model, forecast, load_checkpoint, model_backward, save_checkpoint
from .training import (
    AdamState,
    SplitSpec,
    TrainReport,
    adam_step,
    gradcheck,
    least_squares_loss,
    make_examples,
    split_dataset,
    train,
)

__version__ = "0.1.0"
