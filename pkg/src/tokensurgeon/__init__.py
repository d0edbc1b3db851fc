"""Training-free tokenizer transplantation via Orthogonal Matching Pursuit."""

from .omp import (
    AtomInSpanError,
    BatchSolveError,
    QRState,
    SingularMatrixError,
    SolverConfig,
    SparseCode,
    omp_solve,
    omp_solve_batch,
    qr_append,
    solve_triangular,
)
from .tensorio import (
    EmbdFormatError,
    Vocabulary,
    VocabularyError,
    load_embeddings,
    load_vocabulary,
    save_embeddings,
    save_vocabulary,
)
from .transplant import Method, TransplantReport, apply_code, transplant, transplant_tied_pair
from .vocab_align import (
    AnchorSet,
    Dictionary,
    EmptyOverlapError,
    build_dictionary,
    compute_overlap,
    partition_tokens,
)

__version__ = "0.1.0"
