#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "qalas/signal_model.hpp"

namespace qalas {

using Json = nlohmann::json;

// Flat object, keys named after the SequenceTiming fields, durations in ms.
// Missing keys take their defaults; center_echo_index defaults to turbo_factor / 2.
Json timing_to_json(const SequenceTiming& timing);
SequenceTiming timing_from_json(const Json& json);

Json read_json_file(const std::filesystem::path& path);
// Writes through a temporary file and a rename so readers never see a partial file.
void write_json_file(const std::filesystem::path& path, const Json& json);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

SequenceTiming load_timing(const std::filesystem::path& path);

} // namespace qalas
