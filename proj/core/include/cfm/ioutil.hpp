#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace cfm {

// Writes a file atomically: the writer streams into <path>.tmp-<suffix> and
// the temp file is renamed over the target only after the stream closed
// cleanly. A failing writer leaves no partial output behind.
void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);

// Plain-text list of EMAP paths, one per line. Blank lines and lines starting
// with '#' are skipped; relative entries resolve against the list file's
// directory.
std::vector<std::filesystem::path> read_path_list(
    const std::filesystem::path& list_path);

// Locale-independent float formatting ("%.*g") used for every number that
// lands in a CSV or text report, so reruns are byte-identical.
std::string format_double(double v, int precision = 12);

}  // namespace cfm
