use serde_json::{json, Value};

fn op(summary: &str, responses: &[(&str, &str)]) -> Value {
    let r: serde_json::Map<String, Value> = responses
        .iter()
        .map(|(code, d)| (code.to_string(), json!({ "description": d })))
        .collect();
    json!({ "summary": summary, "responses": r })
}

fn id_param(name: &str) -> Value {
    json!({ "name": name, "in": "path", "required": true, "schema": { "type": "string" } })
}

/// OpenAPI 3 description of the `/v1` API.
pub fn openapi() -> Value {
    let doc = [id_param("id")];
    let job_started = [
        ("202", "job queued; body {job_id}"),
        ("404", "unknown document"),
        ("409", "an earlier stage is missing"),
    ];
    let mut paths = serde_json::Map::new();
    let mut add = |path: &str, item: Value| {
        paths.insert(format!("/v1{path}"), item);
    };
    add(
        "/documents",
        json!({ "post": {
            "summary": "Upload a PNG or JPEG page (raw body or multipart/form-data)",
            "requestBody": { "content": {
                "image/png": {}, "image/jpeg": {}, "multipart/form-data": {}
            }},
            "responses": {
                "201": { "description": "created; body {id}" },
                "413": { "description": "upload larger than max_upload_bytes" },
                "415": { "description": "not a decodable image" }
            }
        }}),
    );
    add(
        "/documents/{id}",
        json!({ "parameters": doc, "get": op("Document state", &[("200", "document"), ("404", "unknown document")]) }),
    );
    add(
        "/documents/{id}/image",
        json!({ "parameters": doc, "get": op("Working image (cropped when a crop is set) as PNG", &[("200", "PNG")]) }),
    );
    add(
        "/documents/{id}/crop",
        json!({ "parameters": doc, "post": {
            "summary": "Set the crop rectangle {x,y,w,h}; clears baselines and text",
            "requestBody": { "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Crop" } } } },
            "responses": {
                "200": { "description": "document" },
                "422": { "description": "rectangle outside the image or empty" }
            }
        }}),
    );
    add(
        "/documents/{id}/segment",
        json!({ "parameters": doc, "post": {
            "summary": "Find baselines with the segmentation model, or take them from a PageXML body",
            "requestBody": { "required": false, "content": { "application/xml": {} } },
            "responses": {
                "202": { "description": "job queued; body {job_id}" },
                "409": { "description": "crop required but missing" },
                "422": { "description": "invalid PageXML" },
                "503": { "description": "no segmentation model and no PageXML body" }
            }
        }}),
    );
    add(
        "/documents/{id}/baselines",
        json!({ "parameters": doc,
            "get": op("Current baselines", &[("200", "{baselines}")]),
            "put": {
                "summary": "Replace baselines; clears text",
                "requestBody": { "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Baselines" } } } },
                "responses": { "200": { "description": "document" }, "422": { "description": "invalid polyline" } }
            }
        }),
    );
    add(
        "/documents/{id}/transcribe",
        json!({ "parameters": doc, "post": op("Transcribe every baseline", &[
            ("202", "job queued; body {job_id}"),
            ("409", "no baselines"),
            ("503", "no recognizer loaded"),
        ]) }),
    );
    add(
        "/documents/{id}/correct",
        json!({ "parameters": doc, "post": op("Language-model correction of the transcription", &job_started) }),
    );
    add(
        "/documents/{id}/translate",
        json!({ "parameters": doc, "post": op("English translation of the transcription", &job_started) }),
    );
    add(
        "/documents/{id}/export",
        json!({ "parameters": [
            id_param("id"),
            { "name": "format", "in": "query", "schema": { "type": "string", "enum": ["json", "txt", "pagexml"], "default": "json" } },
            { "name": "variant", "in": "query", "schema": { "type": "string", "enum": ["raw", "corrected"], "default": "raw" } }
        ], "get": op("Export baselines and text", &[("200", "export"), ("409", "nothing to export")]) }),
    );
    add(
        "/jobs/{id}",
        json!({ "parameters": doc, "get": op("Job state", &[("200", "job"), ("404", "unknown job")]) }),
    );
    json!({
        "openapi": "3.0.3",
        "info": { "title": "rotulus", "version": env!("CARGO_PKG_VERSION") },
        "paths": paths,
        "components": { "schemas": {
            "Crop": {
                "type": "object",
                "required": ["x", "y", "w", "h"],
                "properties": {
                    "x": { "type": "integer" }, "y": { "type": "integer" },
                    "w": { "type": "integer" }, "h": { "type": "integer" }
                }
            },
            "Point": {
                "type": "object",
                "properties": { "x": { "type": "integer" }, "y": { "type": "integer" } }
            },
            "Baselines": {
                "type": "object",
                "properties": { "baselines": { "type": "array", "items": {
                    "type": "object",
                    "required": ["points"],
                    "properties": {
                        "id": { "type": "string" },
                        "points": { "type": "array", "items": { "$ref": "#/components/schemas/Point" } }
                    }
                }}}
            },
            "Job": {
                "type": "object",
                "properties": {
                    "id": { "type": "string" },
                    "kind": { "type": "string", "enum": ["segment", "transcribe", "correct", "translate"] },
                    "state": { "type": "string", "enum": ["queued", "running", "done", "failed"] },
                    "result": { "type": "string" },
                    "error": { "type": "string" }
                }
            }
        }}
    })
}
