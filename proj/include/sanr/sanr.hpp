#pragma once

#include "sanr/bitstream.hpp"
#include "sanr/codec.hpp"
#include "sanr/common.hpp"
#include "sanr/entropy_models.hpp"
#include "sanr/evaluation.hpp"
#include "sanr/frozen_model.hpp"
#include "sanr/layers.hpp"
#include "sanr/lightfield_io.hpp"
#include "sanr/model.hpp"
#include "sanr/quantization.hpp"
#include "sanr/range_coder.hpp"
#include "sanr/rng.hpp"
#include "sanr/tensor.hpp"
#include "sanr/training.hpp"
