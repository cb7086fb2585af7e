"""Score-curvature typicality statistics for out-of-distribution detection.

The statistic pairs the squared norm of a diffusion score model with the
negated trace of its Jacobian (estimated by Hutchinson probes through exact
JVPs); KDE calibration over in-distribution values turns it into an anomaly
score. See the README for the pipeline and CLI.
"""

from .calibration import (
    AnomalyScore,
    CalibrationArtifact,
    KdeModel,
    anomaly_score,
    anomaly_score_batch,
    apply_verdicts,
    calibrate,
    fit_kde,
    kde_nll,
    load_artifact,
    threshold_from_quantile,
)
from .datagen import DatasetSpec, generate, load_dataset, make_task_pair, save_dataset
from .detector import ScopedDetector
from .errors import (
    ConsistencyError,
    InputError,
    NumericalError,
    ScopedError,
    ScoringFailure,
)
from .evaluation import (
    EvalReport,
    PairSpec,
    ablate_timesteps,
    auroc,
    evaluate_pairs,
    nfe_account,
    oracle_timestep,
)
from .schedule import (
    LogNormalSigmaPrior,
    NoiseSchedule,
    SnrCurve,
    build_linear_schedule,
    corrupt,
    corrupt_continuous,
    select_mid_step,
    sigma_mode,
    snr_curve,
)
from .score_models import (
    AnalyticGaussianScore,
    CallCounter,
    DsmTrainConfig,
    GmmScore,
    MlpDenoiser,
    ScoreModel,
    gaussian_score,
    gmm_score,
    jvp_score,
    load_model,
    save_model,
    score_from_denoiser,
    score_from_eps,
    train_dsm,
)
from .typicality import (
    TypicalityConfig,
    TypicalityScore,
    coordinate_trace,
    hutchinson_trace,
    scoped_statistic,
    score_batch,
    sign_factor,
    typicality_ratio,
    write_typicality_csv,
)

__version__ = "0.1.0"
