#pragma once

#include "alignment_losses.hpp"
#include "array.hpp"
#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "coefficients.hpp"
#include "config.hpp"
#include "datagen.hpp"
#include "dataset.hpp"
#include "error.hpp"
#include "evaluate.hpp"
#include "experiment.hpp"
#include "gradcheck.hpp"
#include "harness.hpp"
#include "loss_bundle.hpp"
#include "optim.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "scoring_losses.hpp"
#include "transformer.hpp"
#include "verify.hpp"
#include "vocab.hpp"
