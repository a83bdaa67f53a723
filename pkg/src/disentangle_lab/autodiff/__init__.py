from .gradcheck import check_gradients, fd_rounding_bound, numeric_grad, relative_error
from .nn import (
    STD_EPS,
    attentive_stats_pool,
    bce_with_logit,
    conv1d,
    conv_output_length,
    cross_entropy,
    linear,
    lstm_cell,
    lstm_sequence,
    se_res2_block,
    squeeze_excite,
)
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    div,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    sub,
    tanh,
    topological_order,
    transpose,
    tsum,
    zero_grad,
)
