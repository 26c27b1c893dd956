#include "atelier/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

namespace atelier {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

[[noreturn]] void io_error(const std::string& what, const fs::path& path) {
  throw Error(ErrorCode::IoError, what + " " + path.string() + ": " + std::strerror(errno));
}

void check_id(const std::string& id) {
  if (!is_token_safe(id)) throw Error(ErrorCode::InvalidArgument, "invalid identifier '" + id + "'");
}

std::optional<std::vector<std::uint8_t>> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) io_error("cannot read", path);
  return bytes;
}

std::vector<std::uint8_t> read_required(const fs::path& path, const std::string& what) {
  auto bytes = read_file(path);
  if (!bytes) throw Error(ErrorCode::NotFound, what + " not found");
  return std::move(*bytes);
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::string temp_suffix() {
  static std::atomic<std::uint64_t> counter{0};
  return "." + std::to_string(::getpid()) + "." + std::to_string(counter++) + ".tmp";
}

}  // namespace

ProjectStore::ProjectStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  for (const char* dir : {"captures", "jobs", "results", "masks", "controls"}) {
    fs::create_directories(root_ / dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + (root_ / dir).string() + ": " + ec.message());
  }
}

fs::path ProjectStore::capture_path(const std::string& id, const char* suffix) const {
  check_id(id);
  return root_ / "captures" / (id + suffix);
}

fs::path ProjectStore::job_path(const std::string& id) const {
  check_id(id);
  return root_ / "jobs" / (id + ".json");
}

fs::path ProjectStore::result_path(const std::string& job_id, std::size_t index) const {
  check_id(job_id);
  return root_ / "results" / job_id / (std::to_string(index) + ".png");
}

void ProjectStore::write_atomic(const fs::path& target, std::span<const std::uint8_t> bytes,
                                bool use_hook) {
  std::error_code ec;
  fs::create_directories(target.parent_path(), ec);
  const fs::path temp = target.parent_path() / ("." + target.filename().string() + temp_suffix());

  const int fd = ::open(temp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) io_error("cannot create", temp);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      fs::remove(temp, ec);
      io_error("cannot write", temp);
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    fs::remove(temp, ec);
    io_error("cannot flush", temp);
  }

  if (use_hook && before_rename_) before_rename_(temp);

  if (::rename(temp.c_str(), target.c_str()) != 0) {
    fs::remove(temp, ec);
    io_error("cannot rename onto", target);
  }
}

void ProjectStore::set_before_rename_hook(std::function<void(const fs::path&)> hook) {
  std::lock_guard lock(jobs_mu_);
  before_rename_ = std::move(hook);
}

// ---------------------------------------------------------------------------
// Captures

std::string ProjectStore::put_capture(std::span<const std::uint8_t> color_png,
                                      std::optional<std::span<const std::uint8_t>> depth_png,
                                      std::optional<DepthMeta> meta) {
  const RasterImage color = decode_png(color_png);
  if (depth_png) {
    if (!meta) throw Error(ErrorCode::MissingDepthMeta, "depth upload requires near and far");
    const RasterImage depth = decode_png(*depth_png);
    if (depth.width() != color.width() || depth.height() != color.height()) {
      throw Error(ErrorCode::DimensionMismatch, "depth size differs from color size");
    }
    depth_from_png16(depth, meta->near, meta->far);  // validates format and range
  }

  const std::string id = new_uuid();
  json m{{"v", kSchemaVersion},
         {"id", id},
         {"width", color.width()},
         {"height", color.height()},
         {"has_depth", depth_png.has_value()},
         {"created_ms", now_ms()}};
  if (depth_png) m["depth"] = {{"near", meta->near}, {"far", meta->far}};

  write_atomic(capture_path(id, ".png"), color_png, false);
  if (depth_png) write_atomic(capture_path(id, ".depth.png"), *depth_png, false);
  // The meta file goes last; its presence marks the capture as complete.
  write_atomic(capture_path(id, ".meta.json"), as_bytes(m.dump()), false);
  return id;
}

bool ProjectStore::has_capture(const std::string& id) const {
  if (!is_token_safe(id)) return false;
  return fs::exists(capture_path(id, ".meta.json"));
}

CaptureInfo ProjectStore::capture_info(const std::string& id) const {
  if (!is_token_safe(id)) throw Error(ErrorCode::NotFound, "capture not found");
  const auto bytes = read_required(capture_path(id, ".meta.json"), "capture " + id);
  try {
    const json m = json::parse(bytes.begin(), bytes.end());
    CaptureInfo info;
    info.id = id;
    info.width = m.at("width").get<std::uint32_t>();
    info.height = m.at("height").get<std::uint32_t>();
    info.has_depth = m.at("has_depth").get<bool>();
    info.created_ms = m.value("created_ms", Timestamp{0});
    if (m.contains("depth")) {
      info.depth_meta = DepthMeta{m["depth"].at("near").get<double>(), m["depth"].at("far").get<double>()};
    }
    return info;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, "corrupt capture metadata for " + id + ": " + e.what());
  }
}

std::vector<std::uint8_t> ProjectStore::capture_png(const std::string& id) const {
  if (!has_capture(id)) throw Error(ErrorCode::NotFound, "capture " + id + " not found");
  return read_required(capture_path(id, ".png"), "capture " + id);
}

RasterImage ProjectStore::load_capture(const std::string& id) const {
  return to_rgba(decode_png(capture_png(id)));
}

std::optional<DepthBuffer> ProjectStore::load_capture_depth(const std::string& id) const {
  const CaptureInfo info = capture_info(id);
  if (!info.has_depth || !info.depth_meta) return std::nullopt;
  const auto bytes = read_required(capture_path(id, ".depth.png"), "depth for capture " + id);
  return depth_from_png16(decode_png(bytes), info.depth_meta->near, info.depth_meta->far);
}

// ---------------------------------------------------------------------------
// Jobs

std::optional<JobRecord> ProjectStore::read_job_file(const fs::path& path) const {
  const auto bytes = read_file(path);
  if (!bytes) return std::nullopt;
  const json doc = json::parse(bytes->begin(), bytes->end(), nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("job") || !doc.contains("revision")) {
    throw Error(ErrorCode::IoError, "corrupt job file " + path.string());
  }
  if (doc.value("v", 0) != kSchemaVersion) {
    throw Error(ErrorCode::IoError, "unsupported job schema in " + path.string());
  }
  return JobRecord{job_from_json(doc["job"]), doc["revision"].get<std::int64_t>()};
}

std::int64_t ProjectStore::save_job(const RenderJob& job, std::int64_t expected_revision) {
  const fs::path path = job_path(job.id);
  std::lock_guard lock(jobs_mu_);
  const auto current = read_job_file(path);
  const std::int64_t stored = current ? current->revision : 0;
  if (stored != expected_revision) {
    throw Error(ErrorCode::RevisionConflict, "job " + job.id + " is at revision " +
                                                 std::to_string(stored) + ", expected " +
                                                 std::to_string(expected_revision));
  }
  if (!current && !has_capture(job.capture_id)) {
    throw Error(ErrorCode::NotFound, "capture " + job.capture_id + " not found");
  }
  const std::int64_t next = stored + 1;
  const json doc{{"v", kSchemaVersion}, {"revision", next}, {"job", to_json(job)}};
  write_atomic(path, as_bytes(doc.dump()), true);
  return next;
}

std::optional<JobRecord> ProjectStore::find_job(const std::string& id) const {
  if (!is_token_safe(id)) return std::nullopt;
  return read_job_file(job_path(id));
}

JobRecord ProjectStore::load_job(const std::string& id) const {
  auto rec = find_job(id);
  if (!rec) throw Error(ErrorCode::NotFound, "job " + id + " not found");
  return std::move(*rec);
}

std::vector<JobRecord> ProjectStore::list_jobs(std::optional<JobState> state) const {
  std::vector<JobRecord> out;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(root_ / "jobs", ec)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with(".") || entry.path().extension() != ".json") continue;
    auto rec = read_job_file(entry.path());
    if (!rec) continue;  // removed while listing
    if (!state || rec->job.state == *state) out.push_back(std::move(*rec));
  }
  if (ec) throw Error(ErrorCode::IoError, "cannot list jobs: " + ec.message());
  std::sort(out.begin(), out.end(), [](const JobRecord& a, const JobRecord& b) {
    return std::tie(a.job.created_ms, a.job.id) < std::tie(b.job.created_ms, b.job.id);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Results, masks, control maps

void ProjectStore::put_result(const std::string& job_id, std::size_t index, const RasterImage& img) {
  write_atomic(result_path(job_id, index), encode_png(img), false);
}

std::vector<std::uint8_t> ProjectStore::result_png(const std::string& job_id, std::size_t index) const {
  if (!is_token_safe(job_id)) throw Error(ErrorCode::NotFound, "result not found");
  return read_required(result_path(job_id, index), "result " + std::to_string(index));
}

bool ProjectStore::has_result(const std::string& job_id, std::size_t index) const {
  return is_token_safe(job_id) && fs::exists(result_path(job_id, index));
}

std::size_t ProjectStore::count_results(const std::string& job_id) const {
  std::size_t n = 0;
  while (has_result(job_id, n)) ++n;
  return n;
}

void ProjectStore::delete_results(const std::string& job_id) {
  check_id(job_id);
  std::error_code ec;
  fs::remove_all(root_ / "results" / job_id, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot delete results of " + job_id + ": " + ec.message());
}

void ProjectStore::put_mask(const std::string& job_id, const GrayImage& mask) {
  check_id(job_id);
  write_atomic(root_ / "masks" / (job_id + ".png"), encode_png(to_raster(mask)), false);
}

GrayImage ProjectStore::load_mask(const std::string& job_id) const {
  if (!is_token_safe(job_id)) throw Error(ErrorCode::NotFound, "mask not found");
  return as_gray(decode_png(read_required(root_ / "masks" / (job_id + ".png"), "mask of " + job_id)));
}

void ProjectStore::put_control(const std::string& job_id, ControlKind kind, const GrayImage& map) {
  check_id(job_id);
  write_atomic(root_ / "controls" / job_id / (std::string(to_string(kind)) + ".png"),
               encode_png(to_raster(map)), false);
}

std::optional<GrayImage> ProjectStore::load_control(const std::string& job_id, ControlKind kind) const {
  check_id(job_id);
  const auto bytes = read_file(root_ / "controls" / job_id / (std::string(to_string(kind)) + ".png"));
  if (!bytes) return std::nullopt;
  return as_gray(decode_png(*bytes));
}

RasterImage ProjectStore::load_image_ref(const std::string& ref) const {
  const auto parsed = parse_image_ref(ref);
  if (!parsed) throw Error(ErrorCode::NotFound, "unresolvable image reference '" + ref + "'");
  switch (parsed->kind) {
    case ImageRef::Kind::Capture:
      return load_capture(parsed->id);
    case ImageRef::Kind::Result:
      return to_rgba(decode_png(result_png(parsed->id, parsed->index)));
    case ImageRef::Kind::Mask:
      return to_raster(load_mask(parsed->id));
  }
  throw Error(ErrorCode::NotFound, "unresolvable image reference '" + ref + "'");
}

// ---------------------------------------------------------------------------
// Styles

StyleRegistry style_registry_from_json(const json& doc) {
  const json* list = &doc;
  if (doc.is_object()) {
    if (doc.contains("v") && doc["v"] != kSchemaVersion)
      throw Error(ErrorCode::MalformedRegistry, "unsupported styles.json version");
    if (!doc.contains("styles")) throw Error(ErrorCode::MalformedRegistry, "styles.json lacks \"styles\"");
    list = &doc["styles"];
  }
  if (!list->is_array()) throw Error(ErrorCode::MalformedRegistry, "styles must be an array");

  std::vector<StyleEntry> entries;
  for (const auto& item : *list) {
    if (!item.is_object() || !item.contains("name") || !item["name"].is_string()) {
      throw Error(ErrorCode::MalformedRegistry, "every style needs a string name");
    }
    try {
      StyleEntry e;
      e.name = item["name"].get<std::string>();
      e.display_name = item.value("display_name", e.name);
      e.default_weight = item.value("default_weight", 1.0);
      e.description = item.value("description", std::string());
      if (!(e.default_weight >= 0.0 && e.default_weight <= 2.0)) {
        throw Error(ErrorCode::MalformedRegistry, "style '" + e.name + "' default_weight out of [0, 2]");
      }
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::MalformedRegistry, std::string("bad style entry: ") + ex.what());
    }
  }
  return StyleRegistry(std::move(entries));
}

StyleRegistry ProjectStore::load_style_registry() const {
  const auto bytes = read_file(root_ / "styles.json");
  if (!bytes) return StyleRegistry();
  const json doc = json::parse(bytes->begin(), bytes->end(), nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorCode::MalformedRegistry, "styles.json is not valid JSON");
  return style_registry_from_json(doc);
}

void ProjectStore::save_style_registry(const StyleRegistry& registry) {
  json styles = json::array();
  for (const auto& e : registry.entries()) styles.push_back(to_json(e));
  write_atomic(root_ / "styles.json", as_bytes(json{{"v", kSchemaVersion}, {"styles", styles}}.dump(2)),
               false);
}

}  // namespace atelier
