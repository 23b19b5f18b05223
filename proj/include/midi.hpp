/*
 * Copyright 2026 The midi-tune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "midi/array.hpp"
#include "midi/checkpoint.hpp"
#include "midi/config.hpp"
#include "midi/data.hpp"
#include "midi/errors.hpp"
#include "midi/eval.hpp"
#include "midi/inference.hpp"
#include "midi/memory.hpp"
#include "midi/model.hpp"
#include "midi/ops.hpp"
#include "midi/optim.hpp"
#include "midi/pipeline.hpp"
#include "midi/rng.hpp"
#include "midi/synth.hpp"
#include "midi/tape.hpp"
#include "midi/training.hpp"
