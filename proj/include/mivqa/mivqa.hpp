#pragma once

#include "mivqa/autodiff.hpp"
#include "mivqa/config.hpp"
#include "mivqa/dataset.hpp"
#include "mivqa/encoders.hpp"
#include "mivqa/error.hpp"
#include "mivqa/fusion.hpp"
#include "mivqa/harness.hpp"
#include "mivqa/image.hpp"
#include "mivqa/losses.hpp"
#include "mivqa/model.hpp"
#include "mivqa/params.hpp"
#include "mivqa/rng.hpp"
#include "mivqa/synth.hpp"
#include "mivqa/tokenizer.hpp"
