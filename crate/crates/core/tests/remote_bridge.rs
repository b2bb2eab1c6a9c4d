//! Remote mask and refine clients against an in-process stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use wildsplat::io::{decode_gray_png, decode_png, encode_gray_png, encode_png};
use wildsplat::mask::{MaskProvider, MaskRequest, RemoteMasks, RemoteOptions, RemoteRefiner, ViewKind, DEFAULT_PROMPT};
use wildsplat::{Error, ImageBuffer, ScalarMap};

#[derive(Clone, Copy)]
enum Behavior {
    Stub,
    WrongSize,
    Garbage,
}

fn respond(stream: &mut std::net::TcpStream, status: u16, body: &str) {
    let reason = if status == 200 { "OK" } else { "Bad Request" };
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(msg.as_bytes()).unwrap();
}

fn stub_mask(body: &Value) -> Option<Value> {
    let img = decode_png(&B64.decode(body.get("image")?.as_str()?).ok()?).ok()?;
    let values = img
        .rgb
        .chunks_exact(3)
        .map(|p| if 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] > 0.9 { 1.0 } else { 0.0 })
        .collect();
    let mask = ScalarMap { width: img.width, height: img.height, values };
    Some(json!({ "mask": B64.encode(encode_gray_png(&mask).unwrap()) }))
}

fn stub_refine(body: &Value) -> Option<Value> {
    let rendered = decode_png(&B64.decode(body.get("rendered")?.as_str()?).ok()?).ok()?;
    let reference = decode_png(&B64.decode(body.get("reference")?.as_str()?).ok()?).ok()?;
    let mask = decode_gray_png(&B64.decode(body.get("mask")?.as_str()?).ok()?).ok()?;
    let mut out = rendered.clone();
    for (i, v) in out.rgb.iter_mut().enumerate() {
        let m = mask.values[i / 3];
        *v = rendered.rgb[i] * (1.0 - m) + reference.rgb[i] * m;
    }
    Some(json!({ "refined": B64.encode(encode_png(&out).unwrap()) }))
}

/// Serves `requests` connections, then exits.
fn spawn_stub(behavior: Behavior, requests: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for _ in 0..requests {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let parsed: Option<Value> = serde_json::from_slice(&body).ok();
            match behavior {
                Behavior::Garbage => respond(&mut stream, 200, "{\"mask\": 12"),
                Behavior::WrongSize => {
                    let mask = ScalarMap::new(3, 3);
                    respond(&mut stream, 200, &json!({ "mask": B64.encode(encode_gray_png(&mask).unwrap()) }).to_string());
                }
                Behavior::Stub => {
                    let reply = parsed.as_ref().and_then(|b| match path.as_str() {
                        "/mask" => stub_mask(b),
                        "/refine" => stub_refine(b),
                        _ => None,
                    });
                    match reply {
                        Some(v) => respond(&mut stream, 200, &v.to_string()),
                        None => respond(&mut stream, 400, "{\"error\":\"bad request\"}"),
                    }
                }
            }
        }
    });
    format!("http://{addr}")
}

fn options() -> RemoteOptions {
    RemoteOptions { timeout: Duration::from_secs(5), retries: 0, backoff: Duration::from_millis(1) }
}

fn test_image() -> ImageBuffer {
    let mut img = ImageBuffer::filled(12, 8, [0.2, 0.3, 0.1]);
    for y in 2..5 {
        for x in 3..7 {
            img.set_pixel(x, y, [1.0, 1.0, 1.0]);
        }
    }
    img
}

#[test]
fn remote_masks_satisfy_the_provider_contract() {
    let url = spawn_stub(Behavior::Stub, 2);
    let provider = RemoteMasks::new(&url, options()).unwrap();
    let img = test_image();
    let req = MaskRequest { image: &img, prompt: DEFAULT_PROMPT, view: ViewKind::Train(0) };
    let a = provider.get_mask(&req).unwrap();
    let b = provider.get_mask(&req).unwrap();
    assert_eq!((a.width, a.height), (12, 8));
    assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, b);
    assert_eq!(a.values.iter().filter(|v| **v == 1.0).count(), 12);
}

#[test]
fn remote_mask_on_black_image_is_zero() {
    let url = spawn_stub(Behavior::Stub, 1);
    let provider = RemoteMasks::new(&url, options()).unwrap();
    let img = ImageBuffer::new(8, 8);
    let m = provider.get_mask(&MaskRequest { image: &img, prompt: "", view: ViewKind::Pseudo }).unwrap();
    assert!(m.is_all_zero());
}

#[test]
fn wrong_mask_size_is_a_protocol_error() {
    let url = spawn_stub(Behavior::WrongSize, 1);
    let provider = RemoteMasks::new(&url, options()).unwrap();
    let img = test_image();
    let err = provider.get_mask(&MaskRequest { image: &img, prompt: "", view: ViewKind::Train(1) });
    assert!(matches!(err, Err(Error::Protocol(_))), "{err:?}");
}

#[test]
fn malformed_json_is_a_protocol_error() {
    let url = spawn_stub(Behavior::Garbage, 1);
    let provider = RemoteMasks::new(&url, options()).unwrap();
    let img = test_image();
    let err = provider.get_mask(&MaskRequest { image: &img, prompt: "", view: ViewKind::Train(1) });
    assert!(matches!(err, Err(Error::Protocol(_))), "{err:?}");
}

#[test]
fn rejected_request_is_a_protocol_error() {
    let url = spawn_stub(Behavior::Stub, 1);
    let refiner = RemoteMasks::new(&format!("{url}/nowhere"), options()).unwrap();
    let img = test_image();
    let err = refiner.get_mask(&MaskRequest { image: &img, prompt: "", view: ViewKind::Train(1) });
    assert!(matches!(err, Err(Error::Protocol(_))), "{err:?}");
}

#[test]
fn remote_refine_blends_by_mask() {
    let url = spawn_stub(Behavior::Stub, 2);
    let refiner = RemoteRefiner::new(&url, options()).unwrap();
    let rendered = test_image();
    let reference = ImageBuffer::filled(12, 8, [0.6, 0.4, 0.8]);
    let keep = refiner.refine(&rendered, &reference, &ScalarMap::new(12, 8)).unwrap();
    let swap = refiner.refine(&rendered, &reference, &ScalarMap::filled(12, 8, 1.0)).unwrap();
    let q = |img: &ImageBuffer| encode_png(img).unwrap();
    assert_eq!(q(&keep), q(&rendered));
    assert_eq!(q(&swap), q(&reference));
}
