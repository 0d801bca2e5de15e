from .ingest import (
    CleaningReport,
    Interaction,
    InteractionLog,
    LogSchema,
    ParseReport,
    build_vocab,
    clean,
    parse_log,
    write_log,
)
from .sessions import (
    DEFAULT_GAP_MINUTES,
    SHORT_GAP_MINUTES,
    derive_sessions,
    log_lag_matrix,
    normalized_lags,
    previous_step_log_lag,
    time_lag_matrix,
)
from .sequences import (
    MIN_SEQ_LEN,
    START_TOKEN,
    AugmentedSequence,
    Batch,
    DatasetSplit,
    augment,
    build_sequences,
    dataset_statistics,
    iterate_batches,
    make_batch,
    read_shard,
    session_counts,
    split_by_sessions,
    window,
    write_shard,
)
