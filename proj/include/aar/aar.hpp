#pragma once

// Augmentation-adapted retriever toolkit: dual-encoder retrieval, FiD
// cross-attention annotation, ANCE-style hard-negative training, and the
// evaluation instruments around them.

#include "aar/aat_trainer.hpp"
#include "aar/ann_index.hpp"
#include "aar/config_file.hpp"
#include "aar/corpus_io.hpp"
#include "aar/dual_encoder.hpp"
#include "aar/errors.hpp"
#include "aar/eval_harness.hpp"
#include "aar/experiment.hpp"
#include "aar/fid_reader.hpp"
#include "aar/rng.hpp"
