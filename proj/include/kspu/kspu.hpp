#pragma once

// Umbrella header.
#include "kspu/cli.hpp"
#include "kspu/data.hpp"
#include "kspu/equivariant.hpp"
#include "kspu/errors.hpp"
#include "kspu/metrics.hpp"
#include "kspu/nn.hpp"
#include "kspu/punet.hpp"
#include "kspu/rng.hpp"
#include "kspu/shape_space.hpp"
#include "kspu/tensor.hpp"
#include "kspu/vmf.hpp"
