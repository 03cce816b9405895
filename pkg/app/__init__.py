# app/__init__.py
# SDFLMQ core: transport, fleet control, coordinator, clients, parameter server
