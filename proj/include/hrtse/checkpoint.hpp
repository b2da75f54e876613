#pragma once

#include <string>

#include <json.hpp>

#include "hrtse/modules.hpp"

namespace hrtse {

// Single-file weight container: magic + version, a JSON header echoing the
// run's effective config, then named float arrays. Writes go through a
// temporary file so failures never leave a partial checkpoint behind.
inline constexpr char kCheckpointMagic[8] = {'H', 'R', 'T', 'S',
                                             'E', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const nn::Params& params,
                     const nlohmann::json& header);

// Fills an already-constructed parameter set by name; any missing, extra, or
// reshaped array refuses the load. Returns the stored header.
nlohmann::json load_checkpoint(const std::string& path, nn::Params& params);

nlohmann::json peek_checkpoint_header(const std::string& path);

}  // namespace hrtse
