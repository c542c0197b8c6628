#include "oat/world.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "oat/errors.hpp"

namespace oat {

const float kPalette[kPaletteSize][3] = {
    {0.95f, 0.15f, 0.15f},  // red
    {0.15f, 0.85f, 0.20f},  // green
    {0.20f, 0.35f, 0.95f},  // blue
    {0.95f, 0.90f, 0.15f},  // yellow
    {0.90f, 0.20f, 0.90f},  // magenta
    {0.15f, 0.90f, 0.90f},  // cyan
    {0.95f, 0.55f, 0.10f},  // orange
    {0.92f, 0.92f, 0.92f},  // white
};
const float kBackground[3] = {0.08f, 0.08f, 0.08f};

void WorldConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("world config: " + m); };
  if (window_w >= arena_w || window_h >= arena_h) fail("window must be strictly smaller than arena");
  if (window_w < 4 || window_h < 4) fail("window too small");
  if (n_obj < 2) fail("n_obj must be >= 2");
  if (n_obj > kPaletteSize * kShapeCount) fail("n_obj exceeds distinct sprite identities");
  if (pan_step < 0) fail("pan step must be >= 0");
  if (episode_len < 1) fail("episode_len must be >= 1");
  if (speed_min < 0 || speed_max < speed_min) fail("bad speed range");
  if (sprite_min < 2 || sprite_max < sprite_min) fail("bad sprite size range");
  if (sprite_max >= std::min(window_w, window_h)) fail("sprites must fit in the window");
}

namespace {

bool covers(const ObjectState& o, double px, double py) {
  const double dx = px - o.x;
  const double dy = py - o.y;
  const double hs = o.size / 2.0;
  switch (o.shape) {
    case 0:  // square; half-open so coverage is exactly size^2 pixels
      return dx >= -hs && dx < hs && dy >= -hs && dy < hs;
    case 1:  // circle
      return dx * dx + dy * dy <= hs * hs;
    default:  // triangle, apex up
      return dy >= -hs && dy <= hs && std::abs(dx) <= (dy + hs) * 0.5;
  }
}

int pan_dx(int action, int step) {
  return action == 0 ? -step : action == 1 ? step : 0;
}
int pan_dy(int action, int step) {
  return action == 2 ? -step : action == 3 ? step : 0;
}

int clamp_cam(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

WorldState init_world(const WorldConfig& cfg, Rng& rng) {
  WorldState st;
  st.cam_x = (cfg.arena_w - cfg.window_w) / 2;
  st.cam_y = (cfg.arena_h - cfg.window_h) / 2;

  // Distinct (shape, color) identities per episode.
  std::vector<int> combos(kPaletteSize * kShapeCount);
  for (size_t i = 0; i < combos.size(); ++i) combos[i] = static_cast<int>(i);
  rng.shuffle(combos);

  for (int i = 0; i < cfg.n_obj; ++i) {
    ObjectState o;
    o.shape = combos[i] / kPaletteSize;
    o.color = combos[i] % kPaletteSize;
    o.id = combos[i];
    o.size = rng.uniform_int(cfg.sprite_min, cfg.sprite_max);
    const double hs = o.size / 2.0;
    if (i < (cfg.n_obj + 1) / 2) {
      // Seed half the objects near the initial window so early frames carry
      // content; the rest anywhere in the arena.
      o.x = rng.uniform(std::max(hs, st.cam_x - 4.0),
                        std::min(cfg.arena_w - hs, st.cam_x + cfg.window_w + 4.0));
      o.y = rng.uniform(std::max(hs, st.cam_y - 4.0),
                        std::min(cfg.arena_h - hs, st.cam_y + cfg.window_h + 4.0));
    } else {
      o.x = rng.uniform(hs, cfg.arena_w - hs);
      o.y = rng.uniform(hs, cfg.arena_h - hs);
    }
    const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double ang = rng.uniform(0.0, 6.28318530717958647692);
    o.vx = speed * std::cos(ang);
    o.vy = speed * std::sin(ang);
    st.objects.push_back(o);
  }
  return st;
}

void step_world(WorldState& state, const WorldConfig& cfg, int action) {
  if (action < 0 || action >= WorldConfig::kActions)
    throw std::invalid_argument("step_world: bad action");
  for (ObjectState& o : state.objects) {
    const double hs = o.size / 2.0;
    o.x += o.vx;
    o.y += o.vy;
    const double lox = hs, hix = cfg.arena_w - hs;
    const double loy = hs, hiy = cfg.arena_h - hs;
    if (o.x < lox) {
      o.x = 2 * lox - o.x;
      o.vx = -o.vx;
    } else if (o.x > hix) {
      o.x = 2 * hix - o.x;
      o.vx = -o.vx;
    }
    if (o.y < loy) {
      o.y = 2 * loy - o.y;
      o.vy = -o.vy;
    } else if (o.y > hiy) {
      o.y = 2 * hiy - o.y;
      o.vy = -o.vy;
    }
  }
  state.cam_x = clamp_cam(state.cam_x + pan_dx(action, cfg.pan_step), 0,
                          cfg.arena_w - cfg.window_w);
  state.cam_y = clamp_cam(state.cam_y + pan_dy(action, cfg.pan_step), 0,
                          cfg.arena_h - cfg.window_h);
}

void render_observation(const WorldState& state, const WorldConfig& cfg,
                        float* frame, float* masks, uint8_t* vis) {
  const int W = cfg.window_w, H = cfg.window_h;
  const int n = static_cast<int>(state.objects.size());
  for (int i = 0; i < W * H; ++i) {
    frame[3 * i] = kBackground[0];
    frame[3 * i + 1] = kBackground[1];
    frame[3 * i + 2] = kBackground[2];
  }
  std::memset(masks, 0, sizeof(float) * static_cast<size_t>(n) * W * H);
  std::memset(vis, 0, static_cast<size_t>(n));

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double px = state.cam_x + x + 0.5;
      const double py = state.cam_y + y + 0.5;
      int owner = -1;
      for (int i = 0; i < n; ++i)
        if (covers(state.objects[i], px, py)) owner = i;  // later wins
      if (owner < 0) continue;
      const ObjectState& o = state.objects[owner];
      const int p = y * W + x;
      frame[3 * p] = kPalette[o.color][0];
      frame[3 * p + 1] = kPalette[o.color][1];
      frame[3 * p + 2] = kPalette[o.color][2];
      masks[static_cast<size_t>(owner) * W * H + p] = 1.0f;
      vis[owner] = 1;
    }
}

bool has_occlusion_event(const Trajectory& tr) {
  for (int i = 0; i < tr.n_obj; ++i) {
    int phase = 0;  // 0 await visible, 1 await hidden, 2 await re-visible
    for (int t = 0; t < tr.t; ++t) {
      const bool v = tr.visible(t, i);
      if (phase == 0 && v) phase = 1;
      else if (phase == 1 && !v) phase = 2;
      else if (phase == 2 && v) return true;
    }
  }
  return false;
}

Trajectory generate_trajectory(const WorldConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  const int T = cfg.episode_len;
  const int A = WorldConfig::kActions;
  const int W = cfg.window_w, H = cfg.window_h;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    Rng rng = root.stream("attempt", static_cast<uint64_t>(attempt));
    WorldState st = init_world(cfg, rng);

    Trajectory tr;
    tr.t = T;
    tr.n_obj = cfg.n_obj;
    tr.w = W;
    tr.h = H;
    tr.a = A;
    tr.frames.assign(static_cast<size_t>(T) * W * H * 3, 0.0f);
    tr.masks.assign(static_cast<size_t>(T) * cfg.n_obj * W * H, 0.0f);
    tr.identities.assign(static_cast<size_t>(T) * cfg.n_obj, -1);
    tr.visibility.assign(static_cast<size_t>(T) * cfg.n_obj, 0);
    tr.actions.assign(static_cast<size_t>(T) * A, 0.0f);

    int prev_action = 4;  // stay
    for (int t = 0; t < T; ++t) {
      render_observation(st, cfg,
                         tr.frames.data() + static_cast<size_t>(t) * W * H * 3,
                         tr.masks.data() + static_cast<size_t>(t) * cfg.n_obj * W * H,
                         tr.visibility.data() + static_cast<size_t>(t) * cfg.n_obj);
      for (int i = 0; i < cfg.n_obj; ++i)
        tr.identities[static_cast<size_t>(t) * cfg.n_obj + i] = st.objects[i].id;

      // Momentum-biased pan policy: long sweeps push objects out of view and
      // back in, which drives the occlusion guarantee below.
      int action;
      if (rng.uniform() < 0.65)
        action = prev_action;
      else
        action = rng.uniform_int(0, A - 1);
      tr.actions[static_cast<size_t>(t) * A + action] = 1.0f;
      prev_action = action;
      if (t + 1 < T) step_world(st, cfg, action);
    }

    if (T < 12 || has_occlusion_event(tr)) return tr;
  }
  throw std::runtime_error("generate_trajectory: no occlusion event after 1000 attempts");
}

// ---- dataset io ----
// Layout: magic "OATD", version u32=1, count u32; per episode: T, N_obj, W,
// H, A as u32, then float32 frames, float32 masks, i32 identities, u8
// visibility, float32 actions. Little-endian throughout.

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& f, size_t& off, const char* what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw DataError("dataset truncated at offset " + std::to_string(off) +
                    " while reading " + what);
  off += 4;
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

template <typename T>
void put_array(std::ofstream& f, const std::vector<T>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void get_array(std::ifstream& f, size_t& off, std::vector<T>& v, size_t n,
               const char* what) {
  v.resize(n);
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(n * sizeof(T)));
  if (static_cast<size_t>(f.gcount()) != n * sizeof(T))
    throw DataError("dataset truncated at offset " + std::to_string(off) +
                    " while reading " + what);
  off += n * sizeof(T);
}

}  // namespace

void save_dataset(const std::vector<Trajectory>& trs, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for write: " + path);
  f.write("OATD", 4);
  put_u32(f, 1);
  put_u32(f, static_cast<uint32_t>(trs.size()));
  for (const Trajectory& tr : trs) {
    put_u32(f, static_cast<uint32_t>(tr.t));
    put_u32(f, static_cast<uint32_t>(tr.n_obj));
    put_u32(f, static_cast<uint32_t>(tr.w));
    put_u32(f, static_cast<uint32_t>(tr.h));
    put_u32(f, static_cast<uint32_t>(tr.a));
    put_array(f, tr.frames);
    put_array(f, tr.masks);
    put_array(f, tr.identities);
    put_array(f, tr.visibility);
    put_array(f, tr.actions);
  }
  if (!f) throw DataError("write failed: " + path);
}

std::vector<Trajectory> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  size_t off = 0;
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "OATD", 4) != 0)
    throw DataError("bad magic at offset 0: expected \"OATD\" in " + path);
  off = 4;
  const uint32_t version = get_u32(f, off, "version");
  if (version != 1)
    throw DataError("unsupported dataset version " + std::to_string(version) +
                    " at offset 4 (want 1)");
  const uint32_t count = get_u32(f, off, "episode count");
  std::vector<Trajectory> trs;
  trs.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    Trajectory tr;
    tr.t = static_cast<int>(get_u32(f, off, "T"));
    tr.n_obj = static_cast<int>(get_u32(f, off, "N_obj"));
    tr.w = static_cast<int>(get_u32(f, off, "W"));
    tr.h = static_cast<int>(get_u32(f, off, "H"));
    tr.a = static_cast<int>(get_u32(f, off, "A"));
    if (tr.t <= 0 || tr.n_obj <= 0 || tr.w <= 0 || tr.h <= 0 || tr.a <= 0)
      throw DataError("invalid episode header before offset " + std::to_string(off));
    const size_t whs = static_cast<size_t>(tr.w) * tr.h;
    get_array(f, off, tr.frames, static_cast<size_t>(tr.t) * whs * 3, "frames");
    get_array(f, off, tr.masks, static_cast<size_t>(tr.t) * tr.n_obj * whs, "masks");
    get_array(f, off, tr.identities, static_cast<size_t>(tr.t) * tr.n_obj, "identities");
    get_array(f, off, tr.visibility, static_cast<size_t>(tr.t) * tr.n_obj, "visibility");
    get_array(f, off, tr.actions, static_cast<size_t>(tr.t) * tr.a, "actions");
    trs.push_back(std::move(tr));
  }
  return trs;
}

}  // namespace oat
