#pragma once

#include "mmfal/active_learning.hpp"

#include <filesystem>
#include <string>

namespace mmfal {

/// PNG with macro AUC and accuracy against d, best AUC point marked with its
/// "AUC (d)" label.
void write_learning_curve(const ALHistory& history, const std::filesystem::path& path, const std::string& title);

}  // namespace mmfal
