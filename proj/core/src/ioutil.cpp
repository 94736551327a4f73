#include "cfm/ioutil.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfm/errors.hpp"

namespace fs = std::filesystem;

namespace cfm {

void atomic_write(const fs::path& path,
                  const std::function<void(std::ostream&)>& writer) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open for writing: " + tmp.string());
    try {
      writer(os);
    } catch (...) {
      os.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
    os.flush();
    if (!os) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw io_error("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw io_error("rename failed: " + path.string());
  }
}

std::vector<unsigned char> read_file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::vector<fs::path> read_path_list(const fs::path& list_path) {
  std::ifstream is(list_path);
  if (!is) throw io_error("cannot open list: " + list_path.string());
  const fs::path base = list_path.parent_path();
  std::vector<fs::path> out;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);
    if (line.empty() || line[0] == '#') continue;
    fs::path p(line);
    out.push_back(p.is_absolute() ? p : base / p);
  }
  return out;
}

std::string format_double(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return std::string(buf);
}

}  // namespace cfm
