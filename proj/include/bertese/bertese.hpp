// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bertese/tensor.hpp"
#include "bertese/vocab.hpp"
#include "bertese/world.hpp"
#include "bertese/dataset_io.hpp"
#include "bertese/model.hpp"
#include "bertese/rewriter.hpp"
#include "bertese/optim.hpp"
#include "bertese/checkpoint.hpp"
#include "bertese/config.hpp"
#include "bertese/evaluation.hpp"
#include "bertese/pipeline.hpp"
