#pragma once

#include <memory>
#include <string>
#include <vector>

// Eigen must be fully included before httplib: httplib pulls in <resolv.h>,
// whose `res` macro would otherwise rewrite Eigen's parameter names.
#include "projlens/embedding.hpp"

#include <Eigen/Dense>
#include <httplib.h>
#ifdef res
#undef res
#endif

namespace projlens {

// Remote sentence-embedding adapter: POST {"texts": [...]} to <url>/embed,
// expecting {"vectors": [[...], ...]}. Pair with CachingEmbeddingProvider so
// reruns stay network-free.
class HttpEmbeddingProvider : public EmbeddingProvider {
 public:
  HttpEmbeddingProvider(std::string url, int dim) : url_(std::move(url)), dim_(dim) {
    const auto scheme_end = url_.find("://");
    std::string rest = scheme_end == std::string::npos ? url_ : url_.substr(scheme_end + 3);
    const auto slash = rest.find('/');
    host_ = slash == std::string::npos ? rest : rest.substr(0, slash);
    base_path_ = slash == std::string::npos ? "" : rest.substr(slash);
    if (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  }

  std::string provider_id() const override { return "http:" + url_ + ":d" + std::to_string(dim_); }
  int dim() const override { return dim_; }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    httplib::Client client(host_);
    client.set_read_timeout(30, 0);
    json request;
    request["texts"] = texts;
    const auto res = client.Post((base_path_ + "/embed").c_str(), request.dump(), "application/json");
    if (!res || res->status != 200)
      throw_runtime("embedding provider " + url_ + " unreachable or failed" +
                    (res ? " (status " + std::to_string(res->status) + ")" : ""));
    json body = parse_json_strict(res->body, "embedding response");
    if (!body.contains("vectors") || body["vectors"].size() != texts.size())
      throw_runtime("embedding provider returned a malformed response");
    std::vector<Vec> out;
    for (const auto& row : body["vectors"]) {
      Vec v(static_cast<int>(row.size()));
      if (v.size() != dim_) throw_runtime("embedding provider returned wrong dimension");
      for (size_t i = 0; i < row.size(); ++i) v[static_cast<int>(i)] = row[i].get<double>();
      out.push_back(std::move(v));
    }
    return out;
  }

 private:
  std::string url_, host_, base_path_;
  int dim_;
};

inline std::shared_ptr<EmbeddingProvider> make_http_embedding_provider(const std::string& url,
                                                                       int dim) {
  return std::make_shared<HttpEmbeddingProvider>(url, dim);
}

}  // namespace projlens
