#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "hyperconv/architectures.hpp"
#include "hyperconv/data.hpp"
#include "hyperconv/train.hpp"

namespace hconv {

using Json = nlohmann::json;

/// Rounds to 6 significant digits (what reports print).
double round6(double v);

/// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

void to_json(Json& j, const HyperNetConfig& c);
void from_json(const Json& j, HyperNetConfig& c);
void to_json(Json& j, const LayerSpec& l);
void from_json(const Json& j, LayerSpec& l);
void to_json(Json& j, const ArchitectureConfig& c);
void from_json(const Json& j, ArchitectureConfig& c);
/// Full graph plus the recipe it came from.
void to_json(Json& j, const ArchitectureSpec& s);
/// Accepts a full graph ({"name","recipe","layers"}) or a bare recipe.
void from_json(const Json& j, ArchitectureSpec& s);
void to_json(Json& j, const RunConfig& c);
void from_json(const Json& j, RunConfig& c);
void to_json(Json& j, const NoiseSpec& n);

Json summary_json(const ModelSummary& s);
/// Report without the snapshot tensors; floats rounded to 6 digits.
Json report_json(const RunReport& r);

}  // namespace hconv
