/* Copyright 2026 The qfk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include "qfk/bench.hpp"
#include "qfk/compiler.hpp"
#include "qfk/dataset.hpp"
#include "qfk/graph.hpp"
#include "qfk/image.hpp"
#include "qfk/interpreter.hpp"
#include "qfk/model_io.hpp"
#include "qfk/npy.hpp"
#include "qfk/pipeline.hpp"
#include "qfk/plan.hpp"
#include "qfk/quantizer.hpp"
#include "qfk/reference.hpp"
#include "qfk/runtime.hpp"
#include "qfk/tensor.hpp"
#include "qfk/uynet.hpp"
