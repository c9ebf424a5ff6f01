#pragma once

#include "dlsync/audio_features.hpp"
#include "dlsync/conditioning.hpp"
#include "dlsync/dataset_pipeline.hpp"
#include "dlsync/depth_renderer.hpp"
#include "dlsync/eval_harness.hpp"
#include "dlsync/histogram.hpp"
#include "dlsync/image.hpp"
#include "dlsync/morphable_model.hpp"
#include "dlsync/run_config.hpp"
#include "dlsync/tensor_io.hpp"
#include "dlsync/toy_unet.hpp"
