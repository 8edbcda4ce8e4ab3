#pragma once

#include "urbanst/errors.hpp"
#include "urbanst/random.hpp"
#include "urbanst/kv_text.hpp"
#include "urbanst/dataset.hpp"
#include "urbanst/graph.hpp"
#include "urbanst/kdtree.hpp"
#include "urbanst/tokenizer.hpp"
#include "urbanst/tensor.hpp"
#include "urbanst/rope.hpp"
#include "urbanst/layers.hpp"
#include "urbanst/revin.hpp"
#include "urbanst/model.hpp"
#include "urbanst/gradcheck.hpp"
#include "urbanst/inference.hpp"
#include "urbanst/checkpoint.hpp"
#include "urbanst/masks.hpp"
#include "urbanst/trainer.hpp"
#include "urbanst/eval.hpp"
#include "urbanst/synth.hpp"
