#pragma once

// Umbrella header for the node-level capsule graph network library.

#include "ncgnn/autodiff.hpp"
#include "ncgnn/error.hpp"
#include "ncgnn/eval.hpp"
#include "ncgnn/filter.hpp"
#include "ncgnn/gradcheck.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/io.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/optim.hpp"
#include "ncgnn/rng.hpp"
#include "ncgnn/sparse.hpp"
#include "ncgnn/tensor.hpp"
#include "ncgnn/train.hpp"
