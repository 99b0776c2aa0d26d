use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use image::{ImageFormat, Rgb, RgbImage};
use percent_encoding::percent_decode_str;
use tiny_http::{Header, Method, Request, Response, Server};

use super::{rubric, FeedbackService, RatingSubmission};
use crate::data::{tensor_to_rgb, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::protopnet::ProtoPNet;
use crate::tensor::Tensor3;

/// Jet colour map on `[0, 1]`: blue at 0, red at 1.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// The image blended half-and-half with the jet-coloured display map.
pub fn heatmap_overlay(pixels: &Tensor3, display: &[f64]) -> RgbImage {
    let (_, h, w) = pixels.shape();
    assert_eq!(display.len(), h * w, "overlay shape");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let colour = jet(display[r * w + c]);
        let px: [u8; 3] = std::array::from_fn(|ch| {
            let v = 0.5 * pixels.at(ch, r, c) + 0.5 * colour[ch];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        Rgb(px)
    })
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Renders images and heatmap overlays for one model.
pub struct Renderer {
    model: ProtoPNet,
    images: HashMap<String, LabeledImage>,
}

impl Renderer {
    pub fn new(model: ProtoPNet, data: &Dataset) -> Self {
        let images = data.images.iter().map(|im| (im.id.clone(), im.clone())).collect();
        Self { model, images }
    }

    fn image(&self, id: &str) -> Result<&LabeledImage> {
        self.images.get(id).ok_or_else(|| Error::NotFound(format!("image {id}")))
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>> {
        encode_png(&tensor_to_rgb(&self.image(id)?.pixels))
    }

    pub fn heatmap_png(&self, image_id: &str, prototype_id: usize) -> Result<Vec<u8>> {
        let image = self.image(image_id)?;
        let map = self.model.activation_map(self.model.prototype_index(prototype_id)?, image)?;
        encode_png(&heatmap_overlay(&image.pixels, &map.display))
    }
}

struct Reply {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
}

impl Reply {
    fn json<T: serde::Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).unwrap_or_default(),
        }
    }

    fn error(e: &Error) -> Self {
        let status = match e {
            Error::Validation(_) | Error::Config(_) | Error::Contract(_) | Error::Json(_) => 400,
            Error::Conflict(_) => 409,
            Error::NotFound(_) => 404,
            _ => 500,
        };
        Self::json(status, &serde_json::json!({ "error": e.to_string() }))
    }

    fn png(body: Vec<u8>) -> Self {
        Self {
            status: 200,
            content_type: "image/png",
            body,
        }
    }
}

struct Handler {
    service: Arc<FeedbackService>,
    renderer: Arc<Renderer>,
    static_dir: Option<PathBuf>,
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

impl Handler {
    fn handle(&self, method: &Method, url: &str, body: &[u8]) -> Reply {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let segments: Vec<String> = path
            .trim_matches('/')
            .split('/')
            .map(|s| percent_decode_str(s).decode_utf8_lossy().into_owned())
            .collect();
        let segs: Vec<&str> = segments.iter().map(String::as_str).collect();
        let result = match (method, segs.as_slice()) {
            (Method::Get, ["api", "tasks", "next"]) => {
                let rater = form_urlencoded::parse(query.as_bytes())
                    .find(|(k, _)| k == "rater_id")
                    .map(|(_, v)| v.into_owned())
                    .filter(|v| !v.trim().is_empty());
                match rater {
                    None => Err(Error::Validation("missing rater_id query parameter".into())),
                    Some(r) => self.service.next_task(&r).map(|t| match t {
                        Some(task) => Reply::json(200, &task),
                        None => Reply {
                            status: 204,
                            content_type: "application/json",
                            body: Vec::new(),
                        },
                    }),
                }
            }
            (Method::Post, ["api", "ratings"]) => serde_json::from_slice::<RatingSubmission>(body)
                .map_err(Error::from)
                .and_then(|sub| self.service.submit(sub))
                .map(|rec| Reply::json(201, &rec)),
            (Method::Get, ["api", "progress"]) => Ok(Reply::json(200, &self.service.progress())),
            (Method::Get, ["api", "rubric"]) => Ok(Reply::json(200, &rubric())),
            (Method::Get, ["api", "images", id]) => self.renderer.image_png(id).map(Reply::png),
            (Method::Get, ["api", "heatmaps", id, proto]) => proto
                .parse::<usize>()
                .map_err(|_| Error::NotFound(format!("prototype {proto}")))
                .and_then(|p| self.renderer.heatmap_png(id, p))
                .map(Reply::png),
            (_, ["api", ..]) => Err(Error::NotFound(format!("{method} {path}"))),
            (Method::Get, _) => self.static_file(&segs),
            _ => Err(Error::NotFound(format!("{method} {path}"))),
        };
        result.unwrap_or_else(|e| Reply::error(&e))
    }

    fn static_file(&self, segs: &[&str]) -> Result<Reply> {
        let root = self
            .static_dir
            .as_ref()
            .ok_or_else(|| Error::NotFound("no rating UI bundle is configured".into()))?;
        let rel: PathBuf = if segs.iter().all(|s| s.is_empty()) {
            PathBuf::from("index.html")
        } else {
            segs.iter().collect()
        };
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::NotFound(rel.display().to_string()));
        }
        let full = root.join(&rel);
        let body = std::fs::read(&full).map_err(|_| Error::NotFound(rel.display().to_string()))?;
        Ok(Reply {
            status: 200,
            content_type: content_type(&full),
            body,
        })
    }

    fn respond(&self, mut request: Request) {
        let mut body = Vec::new();
        let reply = match request.as_reader().read_to_end(&mut body) {
            Ok(_) => self.handle(request.method(), request.url(), &body),
            Err(e) => Reply::error(&Error::Io(e)),
        };
        log::debug!("{} {} -> {}", request.method(), request.url(), reply.status);
        let header = Header::from_bytes(&b"Content-Type"[..], reply.content_type.as_bytes()).expect("static header");
        let response = Response::from_data(reply.body).with_status_code(reply.status).with_header(header);
        if let Err(e) = request.respond(response) {
            log::warn!("failed to send response: {e}");
        }
    }
}

/// The rating HTTP service running on a small pool of worker threads.
pub struct RatingServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl RatingServer {
    pub fn start(
        addr: &str,
        service: Arc<FeedbackService>,
        renderer: Arc<Renderer>,
        static_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(|e| Error::Service(format!("cannot bind {addr}: {e}")))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Service("server is not bound to an IP address".into()))?;
        let handler = Arc::new(Handler {
            service,
            renderer,
            static_dir,
        });
        let workers = (0..4)
            .map(|_| {
                let server = server.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        handler.respond(request);
                    }
                })
            })
            .collect();
        log::info!("rating service listening on http://{addr}");
        Ok(Self { server, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the workers stop.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.join();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }

    #[test]
    fn overlay_is_half_opacity() {
        let pixels = Tensor3::from_vec(3, 1, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let img = heatmap_overlay(&pixels, &[0.0, 1.0]);
        // Pixel 0: white blended with jet(0) = (0, 0, 0.5).
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 191]);
        // Pixel 1: black blended with jet(1) = (0.5, 0, 0).
        assert_eq!(img.get_pixel(1, 0).0, [64, 0, 0]);
    }
}
