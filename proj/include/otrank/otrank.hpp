#pragma once

#include "otrank/checkpoint.hpp"
#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/metrics.hpp"
#include "otrank/mine.hpp"
#include "otrank/reranker.hpp"
#include "otrank/sinkhorn.hpp"
#include "otrank/synthetic.hpp"
#include "otrank/training.hpp"
