# app/routes/__init__.py
# read-only status API (sessions, global models)
