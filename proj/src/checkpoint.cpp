#include "oat/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "oat/errors.hpp"

namespace oat {

namespace {

constexpr uint8_t kMaxRank = 8;
constexpr size_t kMaxElems = size_t{1} << 31;

void put(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

struct Reader {
  std::ifstream f;
  size_t off = 0;

  void take(void* p, size_t n, const char* what) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
      throw DataError("checkpoint truncated at byte " + std::to_string(off) +
                      " reading " + what);
    off += n;
  }
  bool at_eof() {
    f.peek();
    return f.eof();
  }
};

bool reserved_name(const std::string& n) { return n.rfind("__", 0) == 0; }

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + tmp + " for writing");
    put(f, kCheckpointMagic, 4);
    const uint32_t ver = kCheckpointVersion;
    put(f, &ver, 4);
    for (const auto& e : entries) {
      if (e.name.empty() || e.name.size() > std::numeric_limits<uint16_t>::max())
        throw std::invalid_argument("checkpoint entry name length invalid");
      if (e.extents.empty() || e.extents.size() > kMaxRank)
        throw std::invalid_argument("checkpoint entry rank invalid: " + e.name);
      size_t n = 1;
      for (uint32_t x : e.extents) n *= x;
      if (n != e.values.size())
        throw std::invalid_argument("checkpoint entry size mismatch: " + e.name);
      const uint16_t nl = static_cast<uint16_t>(e.name.size());
      put(f, &nl, 2);
      put(f, e.name.data(), nl);
      const uint8_t rank = static_cast<uint8_t>(e.extents.size());
      put(f, &rank, 1);
      put(f, e.extents.data(), 4 * e.extents.size());
      put(f, e.values.data(), 8 * e.values.size());
    }
    if (!f) throw DataError("write failed on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("cannot move " + tmp + " into place");
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  Reader r;
  r.f.open(path, std::ios::binary);
  if (!r.f) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("bad checkpoint magic at byte 0 in " + path);
  uint32_t ver = 0;
  r.take(&ver, 4, "version");
  if (ver != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(ver) +
                    " at byte 4 in " + path);

  std::vector<CheckpointEntry> out;
  while (!r.at_eof()) {
    CheckpointEntry e;
    uint16_t nl = 0;
    r.take(&nl, 2, "name length");
    if (nl == 0)
      throw DataError("empty entry name at byte " + std::to_string(r.off - 2));
    e.name.resize(nl);
    r.take(e.name.data(), nl, "name");
    uint8_t rank = 0;
    r.take(&rank, 1, "rank");
    if (rank == 0 || rank > kMaxRank)
      throw DataError("bad rank " + std::to_string(int(rank)) + " at byte " +
                      std::to_string(r.off - 1));
    e.extents.resize(rank);
    r.take(e.extents.data(), 4 * size_t{rank}, "extents");
    size_t n = 1;
    for (uint32_t x : e.extents) {
      n *= x;
      if (x == 0 || n > kMaxElems)
        throw DataError("bad extents for " + e.name + " at byte " +
                        std::to_string(r.off));
    }
    e.values.resize(n);
    r.take(e.values.data(), 8 * n, "values");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CheckpointEntry> snapshot_params(const ParamStore& ps) {
  std::vector<CheckpointEntry> out;
  out.reserve(static_cast<size_t>(ps.count()));
  for (int i = 0; i < ps.count(); ++i) {
    CheckpointEntry e;
    e.name = ps.name(i);
    e.extents = {static_cast<uint32_t>(ps.rows(i)),
                 static_cast<uint32_t>(ps.cols(i))};
    e.values = ps.values(i);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<int> restore_params(ParamStore& ps,
                                const std::vector<CheckpointEntry>& entries) {
  std::vector<int> ids;
  for (const auto& e : entries) {
    if (reserved_name(e.name)) continue;
    if (e.extents.size() != 2)
      throw DataError("parameter " + e.name + " is not rank 2");
    const int r = static_cast<int>(e.extents[0]);
    const int c = static_cast<int>(e.extents[1]);
    int id = ps.find(e.name);
    if (id < 0) {
      id = ps.add(e.name, r, c, e.values);
    } else {
      if (ps.rows(id) != r || ps.cols(id) != c)
        throw DataError("parameter " + e.name + " has shape " +
                        std::to_string(r) + "x" + std::to_string(c) +
                        " but the store holds " + std::to_string(ps.rows(id)) +
                        "x" + std::to_string(ps.cols(id)));
      ps.values(id) = e.values;
    }
    ids.push_back(id);
  }
  return ids;
}

void save_training_state(const std::string& path, const ParamStore& ps,
                         Adam& opt, const std::string& config_text) {
  std::vector<CheckpointEntry> entries = snapshot_params(ps);
  entries.push_back({"__step__",
                     {1},
                     {static_cast<double>(opt.steps_done())}});
  for (int i = 0; i < ps.count(); ++i) {
    const std::vector<uint32_t> shape = {static_cast<uint32_t>(ps.rows(i)),
                                         static_cast<uint32_t>(ps.cols(i))};
    entries.push_back({"__adam_m__/" + ps.name(i), shape, opt.m(i)});
    entries.push_back({"__adam_v__/" + ps.name(i), shape, opt.v(i)});
  }
  if (!config_text.empty()) {
    CheckpointEntry cfg;
    cfg.name = "__config__";
    cfg.extents = {static_cast<uint32_t>(config_text.size())};
    cfg.values.reserve(config_text.size());
    for (unsigned char ch : config_text) cfg.values.push_back(double(ch));
    entries.push_back(std::move(cfg));
  }
  write_checkpoint(path, entries);
}

std::string checkpoint_config_text(
    const std::vector<CheckpointEntry>& entries) {
  for (const auto& e : entries) {
    if (e.name != "__config__") continue;
    std::string text;
    text.reserve(e.values.size());
    for (double v : e.values)
      text.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return text;
  }
  return {};
}

TrainingState load_training_state(const std::string& path, ParamStore& ps,
                                  Adam* opt) {
  const auto entries = read_checkpoint(path);
  restore_params(ps, entries);
  TrainingState st;
  if (opt) opt->sync_new_params();
  for (const auto& e : entries) {
    if (e.name == "__step__") {
      if (e.values.size() != 1)
        throw DataError("__step__ entry malformed");
      st.step = static_cast<int64_t>(e.values[0]);
      if (opt) opt->set_steps_done(st.step);
    } else if (e.name == "__config__") {
      st.config_text.reserve(e.values.size());
      for (double v : e.values)
        st.config_text.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    } else if (opt && e.name.rfind("__adam_m__/", 0) == 0) {
      const int id = ps.find(e.name.substr(11));
      if (id >= 0 && opt->m(id).size() == e.values.size())
        opt->m(id) = e.values;
    } else if (opt && e.name.rfind("__adam_v__/", 0) == 0) {
      const int id = ps.find(e.name.substr(11));
      if (id >= 0 && opt->v(id).size() == e.values.size())
        opt->v(id) = e.values;
    }
  }
  return st;
}

}  // namespace oat
