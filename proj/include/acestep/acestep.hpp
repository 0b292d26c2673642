#pragma once

#include "acestep/autodiff.hpp"
#include "acestep/checkpoint.hpp"
#include "acestep/conditioning.hpp"
#include "acestep/config.hpp"
#include "acestep/core.hpp"
#include "acestep/dcae.hpp"
#include "acestep/dit.hpp"
#include "acestep/lora.hpp"
#include "acestep/model.hpp"
#include "acestep/objectives.hpp"
#include "acestep/optim.hpp"
#include "acestep/params.hpp"
#include "acestep/pipeline.hpp"
#include "acestep/run.hpp"
#include "acestep/sampler.hpp"
#include "acestep/tokenizer.hpp"
#include "acestep/trainer.hpp"
